"""Data ingestion, run configuration, and result emission.

Four CSV streams (UTF-8, '.' decimal, mandatory headers) keyed by subject:

* ``viral_load.csv``: ``subject_id, day, copies_per_ml``
* ``mems_events.csv``: ``subject_id, drug, day_fractional``
* ``ic50.csv``: ``subject_id, drug, s0, sf, tf_day`` (``sf``/``tf_day``
  empty when no failure-time assay was taken)
* ``covariates.csv``: ``subject_id, baseline_log10_vl, baseline_cd4``

Run configuration is a flat ``key = value`` text file; unknown keys are
rejected and every key has a documented default. The effective
configuration is echoed into every output file (as ``#``-prefixed header
lines in CSVs, as a ``config`` object in JSON), so outputs are bitwise
reproducible from their own embedded settings. Output files never carry
timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adherence import MODEL_LABELS, MemsLog, VisitSchedule
from .efficacy import (
    CovariatePair,
    EfficacyInputs,
    Ic50Trajectory,
    compile_control,
    compile_efficacy,
    standardize_covariates,
)
from .errors import ConfigError, ReferentialIntegrityError, SchemaError
from .ode import IntegratorConfig
from .sampler import Hyperpriors, McmcConfig, ObservationSet, SubjectData
from .simstudy import SyntheticSource, TrialDesign

DRUG_IDS = ("1", "2")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s):
    return tuple(float(x) for x in s.split(","))


def _parse_ints(s):
    return tuple(int(x) for x in s.split(","))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse_metric(s):
    v = s.strip()
    if v not in MODEL_LABELS:
        raise ValueError(f"unknown model label {v!r}; choose from "
                         f"{', '.join(MODEL_LABELS)}")
    return v


def _parse_metrics(s):
    return tuple(_parse_metric(x) for x in s.split(","))


#: key -> (default, parser, doc)
CONFIG_SPEC = {
    "hyper_a": (4.5, float, "Gamma shape for the residual precision prior"),
    "hyper_b": (9.0, float, "Gamma rate for the residual precision prior"),
    "hyper_nu": (10.0, float, "Wishart degrees of freedom"),
    "hyper_eta": ((1.1, -1.0, -2.5, 1.2, 1.0, 1.0, 0.5, 0.5), _parse_floats,
                  "prior mean of the population vector (8 values)"),
    "hyper_lambda_diag": (tuple([100.0] * 8), _parse_floats,
                          "diagonal of the population prior covariance"),
    "hyper_omega_diag": (tuple([2.5] * 6), _parse_floats,
                         "diagonal of the Wishart scale matrix"),
    "burn_in": (20000, int, "discarded initial sweeps"),
    "keep_every": (4, int, "thinning stride after burn-in"),
    "n_kept": (20000, int, "retained posterior samples"),
    "seed": (0, int, "root RNG seed"),
    "proposal_scale": (0.1, float, "initial per-subject MH step scale"),
    "adapt_window": (50, int, "sweeps between scale adaptations in burn-in"),
    "threads": (1, int, "worker parallelism"),
    "metric": ("M2.2", _parse_metric, "adherence summary used by `fit`"),
    "metrics": (MODEL_LABELS, _parse_metrics,
                "model labels compared by `compare`"),
    "rel_tol": (1e-8, float, "integrator relative tolerance"),
    "abs_tol": (1e-10, float, "integrator absolute tolerance"),
    "max_step": (math.inf, float, "integrator maximum step (days)"),
    "censor_enabled": (True, _parse_bool,
                       "replace viral loads below the detection limit"),
    "censor_limit_copies": (50.0, float, "detection limit (copies/ml)"),
    "censor_replace_copies": (25.0, float,
                              "replacement value for undetectable loads"),
    "doses_per_day": (2, int, "prescribed dosing events per day"),
    "sim_n_subjects": (10, int, "simulation-study subjects per trial"),
    "sim_n_reps": (10, int, "simulation-study replications"),
    "sim_visit_weeks": ((0, 2, 4, 8, 12, 16, 24, 32, 40, 48, 56, 64, 72),
                        _parse_ints, "simulated visit schedule (weeks)"),
    "sim_true_mu": ((0.767, -0.977, -4.086, 0.433, 1.040, -2.615, -0.670,
                     0.719), _parse_floats,
                    "generating population vector (8 values)"),
    "sim_true_sigma_diag": (tuple([0.04] * 6), _parse_floats,
                            "diagonal of the generating between-subject "
                            "covariance"),
    "sim_sigma_sq": (0.25, float, "generating residual variance"),
    "sim_adherence_beta": ((2.0, 0.6), _parse_floats,
                           "Beta(a,b) for per-interval adherence rates"),
    "sim_censor": (False, _parse_bool,
                   "apply the detection-limit floor to generated data"),
}


@dataclass
class RunConfig:
    """Typed view of the flat key-value configuration."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: spec[0] for k, (*spec,) in CONFIG_SPEC.items()}
        for k, v in self.values.items():
            if k not in full:
                raise ConfigError(f"unknown config key {k!r}")
            full[k] = v
        self.values = full

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **overrides):
        vals = dict(self.values)
        for k, v in overrides.items():
            if v is None:
                continue
            if k not in CONFIG_SPEC:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = v
        return RunConfig(vals)

    def echo_items(self):
        """Canonical (key, formatted value) pairs, stable order.

        ``threads`` is omitted: results are independent of worker
        parallelism, so serial and parallel runs emit identical bytes.
        """
        return [(k, _fmt(self.values[k])) for k in sorted(self.values)
                if k != "threads"]

    def echo_dict(self):
        return {k: v for k, v in self.echo_items()}

    def hyperpriors(self):
        return Hyperpriors(
            a=self["hyper_a"],
            b=self["hyper_b"],
            eta=np.array(self["hyper_eta"]),
            lambda_mat=np.diag(self["hyper_lambda_diag"]),
            omega=np.diag(self["hyper_omega_diag"]),
            nu=self["hyper_nu"],
        )

    def mcmc(self):
        return McmcConfig(
            burn_in=self["burn_in"],
            keep_every=self["keep_every"],
            n_kept=self["n_kept"],
            seed=self["seed"],
            proposal_scale=self["proposal_scale"],
            adapt_window=self["adapt_window"],
            threads=self["threads"],
        )

    def integrator(self):
        return IntegratorConfig(rel_tol=self["rel_tol"],
                                abs_tol=self["abs_tol"],
                                max_step=self["max_step"])

    def trial_design(self):
        return TrialDesign(
            n_subjects=self["sim_n_subjects"],
            visit_weeks=self["sim_visit_weeks"],
            true_mu=np.array(self["sim_true_mu"]),
            true_sigma=np.diag(self["sim_true_sigma_diag"]),
            true_sigma_sq=self["sim_sigma_sq"],
            source=SyntheticSource(adherence_beta=self["sim_adherence_beta"]),
            seed=self["seed"],
            censor=self["sim_censor"],
            censor_limit_copies=self["censor_limit_copies"],
            censor_replace_copies=self["censor_replace_copies"],
        )


def default_config():
    return RunConfig({})


def parse_config(path):
    """Parse a flat ``key = value`` file; '#' starts a comment."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key = value, "
                              f"got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in CONFIG_SPEC:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        parser = CONFIG_SPEC[key][1]
        try:
            values[key] = parser(val)
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f"{path}: line {lineno}: bad value for {key}: {exc}"
            ) from None
    return RunConfig(values)


def config_docs():
    """One doc line per key (key, default, description)."""
    return [(k, _fmt(d), doc) for k, (d, _p, doc) in CONFIG_SPEC.items()]


# ---------------------------------------------------------------------------
# Study bundle
# ---------------------------------------------------------------------------

@dataclass
class PatientRecord:
    """One subject's loaded data streams."""

    subject_id: str
    days: np.ndarray          # viral-load measurement days (ints as float)
    copies: np.ndarray        # copies/ml after detection-limit handling
    y: np.ndarray             # log10 copies
    mems: dict                # drug id -> MemsLog
    ic50: dict                # drug id -> Ic50Trajectory
    baseline_log10_vl: float
    baseline_cd4: float


@dataclass
class StudyBundle:
    records: dict             # subject_id -> PatientRecord, sorted by id
    provenance: dict          # file name -> sha256, plus load timestamp
    censor_enabled: bool
    censor_limit_copies: float
    censor_replace_copies: float

    @property
    def subject_ids(self):
        return tuple(self.records)


def _sha256(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _read_rows(path, expected_header):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise SchemaError("file not found", path=path) from None
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file", path=path) from None
    if [h.strip() for h in header] != list(expected_header):
        raise SchemaError(
            f"header must be {','.join(expected_header)!r}, got "
            f"{','.join(header)!r}", path=path, line=1
        )
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(expected_header):
            raise SchemaError(
                f"expected {len(expected_header)} fields, got {len(row)}",
                path=path, line=lineno,
            )
        rows.append((lineno, [c.strip() for c in row]))
    return rows


def _to_float(path, lineno, column, value, allow_empty=False):
    if value == "":
        if allow_empty:
            return None
        raise SchemaError("empty numeric field", path=path, line=lineno,
                          column=column)
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"not a number: {value!r}", path=path, line=lineno,
                          column=column) from None


def load_bundle(data_dir, censor_enabled=True, censor_limit_copies=50.0,
                censor_replace_copies=25.0, doses_per_day=2):
    """Load and validate the four data streams from a directory.

    Rejection is total: any schema or referential-integrity violation
    raises and no partially-loaded bundle escapes.
    """
    data_dir = Path(data_dir)
    paths = {name: data_dir / f"{name}.csv"
             for name in ("viral_load", "mems_events", "ic50", "covariates")}

    vl_rows = _read_rows(paths["viral_load"],
                         ("subject_id", "day", "copies_per_ml"))
    mems_rows = _read_rows(paths["mems_events"],
                           ("subject_id", "drug", "day_fractional"))
    ic50_rows = _read_rows(paths["ic50"],
                           ("subject_id", "drug", "s0", "sf", "tf_day"))
    cov_rows = _read_rows(paths["covariates"],
                          ("subject_id", "baseline_log10_vl", "baseline_cd4"))

    vl = {}
    for lineno, (sid, day, copies) in vl_rows:
        day_f = _to_float(paths["viral_load"], lineno, "day", day)
        if day_f != int(day_f) or day_f < 0:
            raise SchemaError(f"day must be a nonnegative whole number, got "
                              f"{day}", path=paths["viral_load"], line=lineno,
                              column="day")
        copies_f = _to_float(paths["viral_load"], lineno, "copies_per_ml",
                             copies)
        if copies_f <= 0:
            raise SchemaError("copies_per_ml must be positive",
                              path=paths["viral_load"], line=lineno,
                              column="copies_per_ml")
        if censor_enabled and copies_f < censor_limit_copies:
            copies_f = censor_replace_copies
        vl.setdefault(sid, []).append((day_f, copies_f))

    known = set(vl)

    covariates = {}
    for lineno, (sid, bvl, bcd4) in cov_rows:
        if sid in covariates:
            raise SchemaError(f"duplicate covariate row for subject {sid}",
                              path=paths["covariates"], line=lineno)
        covariates[sid] = (
            _to_float(paths["covariates"], lineno, "baseline_log10_vl", bvl),
            _to_float(paths["covariates"], lineno, "baseline_cd4", bcd4),
        )
    missing = sorted(known - set(covariates))
    if missing:
        raise ReferentialIntegrityError(
            f"subjects without covariates: {', '.join(missing)}"
        )

    mems = {}
    for lineno, (sid, drug, day) in mems_rows:
        if sid not in known:
            raise ReferentialIntegrityError(
                f"{paths['mems_events']}: line {lineno}: MEMS row for "
                f"unknown subject {sid}"
            )
        if drug not in DRUG_IDS:
            raise SchemaError(f"drug must be one of {DRUG_IDS}, got {drug!r}",
                              path=paths["mems_events"], line=lineno,
                              column="drug")
        day_f = _to_float(paths["mems_events"], lineno, "day_fractional", day)
        mems.setdefault(sid, {}).setdefault(drug, []).append(day_f)

    ic50 = {}
    for lineno, (sid, drug, s0, sf, tf) in ic50_rows:
        if sid not in known:
            raise ReferentialIntegrityError(
                f"{paths['ic50']}: line {lineno}: IC50 row for unknown "
                f"subject {sid}"
            )
        if drug not in DRUG_IDS:
            raise SchemaError(f"drug must be one of {DRUG_IDS}, got {drug!r}",
                              path=paths["ic50"], line=lineno, column="drug")
        if drug in ic50.get(sid, {}):
            raise SchemaError(f"duplicate IC50 row for subject {sid} "
                              f"drug {drug}", path=paths["ic50"], line=lineno)
        s0_f = _to_float(paths["ic50"], lineno, "s0", s0)
        sf_f = _to_float(paths["ic50"], lineno, "sf", sf, allow_empty=True)
        tf_f = _to_float(paths["ic50"], lineno, "tf_day", tf, allow_empty=True)
        if (sf_f is None) != (tf_f is None):
            raise SchemaError("sf and tf_day must be both present or both "
                              "empty", path=paths["ic50"], line=lineno)
        try:
            traj = Ic50Trajectory(s0=s0_f, sf=sf_f, tf=tf_f)
        except Exception as exc:
            raise SchemaError(str(exc), path=paths["ic50"],
                              line=lineno) from None
        ic50.setdefault(sid, {})[drug] = traj

    records = {}
    for sid in sorted(known):
        series = sorted(vl[sid])
        days = np.array([d for d, _ in series])
        if np.unique(days).size != days.size:
            raise SchemaError(f"duplicate measurement days for subject {sid}",
                              path=paths["viral_load"])
        copies = np.array([c for _, c in series])
        records[sid] = PatientRecord(
            subject_id=sid,
            days=days,
            copies=copies,
            y=np.log10(copies),
            mems={d: MemsLog(events=tuple(sorted(ts)),
                             doses_per_day=doses_per_day)
                  for d, ts in sorted(mems.get(sid, {}).items())},
            ic50=ic50.get(sid, {}),
            baseline_log10_vl=covariates[sid][0],
            baseline_cd4=covariates[sid][1],
        )

    provenance = {name: _sha256(p) for name, p in paths.items()}
    provenance["loaded_at_unix"] = time.time()
    return StudyBundle(
        records=records,
        provenance=provenance,
        censor_enabled=censor_enabled,
        censor_limit_copies=censor_limit_copies,
        censor_replace_copies=censor_replace_copies,
    )


def write_bundle(bundle, data_dir):
    """Write a bundle back to the four-CSV layout (full float precision)."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    with open(data_dir / "viral_load.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("subject_id,day,copies_per_ml\n")
        for sid, rec in bundle.records.items():
            for d, c in zip(rec.days, rec.copies):
                fh.write(f"{sid},{int(d)},{_fmt(float(c))}\n")
    with open(data_dir / "mems_events.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("subject_id,drug,day_fractional\n")
        for sid, rec in bundle.records.items():
            for drug, log in rec.mems.items():
                for t in log.events:
                    fh.write(f"{sid},{drug},{_fmt(float(t))}\n")
    with open(data_dir / "ic50.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject_id,drug,s0,sf,tf_day\n")
        for sid, rec in bundle.records.items():
            for drug, traj in rec.ic50.items():
                sf = "" if traj.tf is None else _fmt(float(traj.sf))
                tf = "" if traj.tf is None else _fmt(float(traj.tf))
                fh.write(f"{sid},{drug},{_fmt(float(traj.s0))},{sf},{tf}\n")
    with open(data_dir / "covariates.csv", "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("subject_id,baseline_log10_vl,baseline_cd4\n")
        for sid, rec in bundle.records.items():
            fh.write(f"{sid},{_fmt(float(rec.baseline_log10_vl))},"
                     f"{_fmt(float(rec.baseline_cd4))}\n")


# ---------------------------------------------------------------------------
# Observation-set assembly
# ---------------------------------------------------------------------------

def _aliased_mems(record):
    """Drug 1/2 MEMS logs, aliasing one drug's log to the other when only a
    single cap was monitored (same twice-daily schedule)."""
    logs = record.mems
    if "1" in logs and "2" in logs:
        return logs["1"], logs["2"]
    if "1" in logs:
        return logs["1"], logs["1"]
    if "2" in logs:
        return logs["2"], logs["2"]
    raise ReferentialIntegrityError(
        f"subject {record.subject_id} has no MEMS events"
    )


def _aliased_ic50(record):
    trajs = record.ic50
    if "1" in trajs and "2" in trajs:
        return trajs["1"], trajs["2"]
    if "1" in trajs:
        return trajs["1"], trajs["1"]
    if "2" in trajs:
        return trajs["2"], trajs["2"]
    raise ReferentialIntegrityError(
        f"subject {record.subject_id} has no IC50 assay"
    )


def build_observation_set(bundle, model_label, metric_specs=None):
    """Assemble the sampler input for one model label.

    ``control`` ignores adherence, resistance and covariates; every other
    label summarizes the MEMS logs under the named window metric.
    """
    from .adherence import METRICS, build_profile

    if model_label not in MODEL_LABELS:
        raise ConfigError(f"unknown model label {model_label!r}")

    ids = list(bundle.subject_ids)
    subjects = []
    if model_label == "control":
        for sid in ids:
            rec = bundle.records[sid]
            t_end = float(rec.days[-1])
            bounds, coef = compile_control(t_end)
            subjects.append(SubjectData(
                subject_id=sid,
                times=rec.days.astype(float),
                y=rec.y.copy(),
                covariates=CovariatePair(0.0, 0.0),
                seg_bounds=bounds,
                seg_coef=coef,
            ))
        return ObservationSet(subjects, info={"model": model_label})

    spec = METRICS[model_label]
    raw_cov = [(bundle.records[sid].baseline_log10_vl,
                bundle.records[sid].baseline_cd4) for sid in ids]
    pairs, transform = standardize_covariates(raw_cov)
    for sid, cov in zip(ids, pairs):
        rec = bundle.records[sid]
        schedule = VisitSchedule(tuple(int(d) for d in rec.days))
        log1, log2 = _aliased_mems(rec)
        ic1, ic2 = _aliased_ic50(rec)
        inputs = EfficacyInputs(
            adherence1=build_profile(log1, schedule, spec),
            adherence2=build_profile(log2, schedule, spec),
            ic50_1=ic1,
            ic50_2=ic2,
            covariates=cov,
        )
        t_end = float(rec.days[-1])
        bounds, coef = compile_efficacy(inputs, t_end, label=f"subject {sid}")
        subjects.append(SubjectData(
            subject_id=sid,
            times=rec.days.astype(float),
            y=rec.y.copy(),
            covariates=cov,
            seg_bounds=bounds,
            seg_coef=coef,
        ))
    return ObservationSet(
        subjects,
        info={"model": model_label,
              "covariate_means": transform.means,
              "covariate_sds": transform.sds},
    )


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def echo_header_lines(config, seed, extra=None):
    lines = [f"# {k} = {v}" for k, v in config.echo_items()]
    lines.append(f"# effective_seed = {seed}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k} = {v}")
    return lines


def write_table(path, columns, rows, header_lines=()):
    """CSV with '#'-prefixed provenance lines before the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_table(path):
    """Read back a CSV written by :func:`write_table`.

    Returns ``(echo, columns, rows)`` where ``echo`` maps the embedded
    provenance keys to their string values.
    """
    echo = {}
    columns = None
    rows = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if raw.startswith("#"):
            body = raw[1:].strip()
            if "=" in body:
                k, _, v = body.partition("=")
                echo[k.strip()] = v.strip()
            continue
        if columns is None:
            columns = raw.split(",")
            continue
        rows.append(raw.split(","))
    return echo, columns, rows


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
