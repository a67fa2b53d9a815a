"""Command-line interface.

Subcommands: ``fit`` (one model, posterior outputs), ``compare``
(DIC table across model labels), ``simstudy`` (parameter-recovery study),
``summarize-adherence`` (per-subject per-visit rate table). Exit codes:
0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .adherence import METRIC_NAMES, METRICS, VisitSchedule, visit_rates, \
    window_for_visit
from .errors import ChainAbortError, NumericError, ValidationError
from .io import (
    build_observation_set,
    default_config,
    echo_header_lines,
    load_bundle,
    parse_config,
    write_json,
    write_table,
)
from .model_select import dic_from_chain, rank_models
from .sampler import CONVENTIONS, MU_LABELS, THETA_LABELS, equal_tail_ci, \
    predict_log10_vl, run_chain
from .simstudy import run_replications

FITTED_GRID_POINTS = 201


def _provenance_echo(bundle):
    return {f"sha256_{name}": digest
            for name, digest in sorted(bundle.provenance.items())
            if name != "loaded_at_unix"}


def _run_one_fit(bundle, label, config):
    obs = build_observation_set(bundle, label)
    chain = run_chain(obs, config.hyperpriors(), config.mcmc(),
                      config.integrator())
    dic = dic_from_chain(chain, obs, model_label=label,
                         threads=config["threads"])
    return obs, chain, dic


def cmd_fit(bundle, config, out_dir):
    """Fit the configured model and write samples, summaries and fitted
    trajectories."""
    out = Path(out_dir)
    label = config["metric"]
    try:
        obs, chain, dic = _run_one_fit(bundle, label, config)
    except ChainAbortError as exc:
        write_json(out / "failure_report.json", {
            "config": config.echo_dict(),
            "model": label,
            "error": str(exc),
            "sweep": exc.sweep,
        })
        raise

    echo = echo_header_lines(config, chain.seed,
                             extra={"model": label, **_provenance_echo(bundle)})
    upper = [(r, c) for r in range(6) for c in range(r, 6)]

    columns = (["sample"] + [f"mu_{k}" for k in MU_LABELS]
               + ["sigma_inv_sq"]
               + [f"Sigma_{r + 1}{c + 1}" for r, c in upper]
               + ["deviance"])
    rows = []
    for g in range(chain.n_kept):
        rows.append([g] + list(chain.mu[g]) + [chain.sigma_inv_sq[g]]
                    + [chain.big_sigma[g, r, c] for r, c in upper]
                    + [chain.deviance[g]])
    write_table(out / "posterior_samples.csv", columns, rows, echo)

    columns = ["sample", "subject_id"] + [f"theta_{k}" for k in THETA_LABELS]
    rows = []
    for g in range(chain.n_kept):
        for i, sid in enumerate(chain.subject_ids):
            rows.append([g, sid] + list(chain.thetas[g, i]))
    write_table(out / "subject_samples.csv", columns, rows, echo)

    lo, hi = equal_tail_ci(chain.mu)
    mean = chain.mu.mean(axis=0)
    summary = {
        "config": config.echo_dict(),
        "effective_seed": chain.seed,
        "model": label,
        "provenance": _provenance_echo(bundle),
        "conventions": CONVENTIONS,
        "population": {
            k: {"mean": float(mean[j]), "ci_low": float(lo[j]),
                "ci_high": float(hi[j])}
            for j, k in enumerate(MU_LABELS)
        },
        "sigma_inv_sq": _scalar_summary(chain.sigma_inv_sq),
        "acceptance": {sid: float(a) for sid, a in
                       zip(chain.subject_ids, chain.acceptance)},
        "proposal_scales": {sid: float(s) for sid, s in
                            zip(chain.subject_ids, chain.proposal_scales)},
        "dic": {"model": dic.model_label, "dic": dic.dic, "d_bar": dic.d_bar,
                "d_at_mean": dic.d_at_mean, "p_d": dic.p_d},
    }
    write_json(out / "posterior_summary.json", summary)

    theta_bar = chain.thetas.mean(axis=0)
    rows = []
    for i, subj in enumerate(obs.subjects):
        t_end = float(subj.seg_bounds[-1])
        grid = np.linspace(0.0, t_end, FITTED_GRID_POINTS)
        fitted = predict_log10_vl(theta_bar[i], _with_times(subj, grid),
                                  chain.integrator)
        if fitted is None:
            raise NumericError(
                f"posterior-mean trajectory failed for subject "
                f"{subj.subject_id}"
            )
        rows.extend([subj.subject_id, t, f] for t, f in zip(grid, fitted))
    write_table(out / "fitted_trajectories.csv",
                ["subject_id", "day", "fitted_log10_vl"], rows, echo)

    rows = []
    for subj in obs.subjects:
        rows.extend([subj.subject_id, t, y]
                    for t, y in zip(subj.times, subj.y))
    write_table(out / "observed_data.csv",
                ["subject_id", "day", "observed_log10_vl"], rows, echo)
    return summary


def _with_times(subj, times):
    from dataclasses import replace

    return replace(subj, times=np.asarray(times, dtype=float),
                   y=np.zeros(len(times)))


def _scalar_summary(samples):
    lo, hi = equal_tail_ci(samples)
    return {"mean": float(np.mean(samples)), "ci_low": float(lo),
            "ci_high": float(hi)}


def _compare_worker(payload):
    bundle, label, config = payload
    try:
        _obs, _chain, dic = _run_one_fit(bundle, label, config)
        return label, dic, None
    except NumericError as exc:
        return label, None, f"{type(exc).__name__}: {exc}"


def cmd_compare(bundle, config, out_dir):
    """Fit every configured model label and write the ranked DIC table."""
    out = Path(out_dir)
    labels = config["metrics"]
    if len(labels) < 2:
        raise ValidationError("compare needs at least two model labels")
    payloads = [(bundle, label, config) for label in labels]
    threads = config["threads"]
    if threads > 1 and len(labels) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_compare_worker, payloads))
    else:
        results = [_compare_worker(p) for p in payloads]

    summaries = [dic for _, dic, err in results if err is None]
    failures = {label: err for label, _, err in results if err is not None}
    if len(summaries) < 2:
        raise NumericError(
            "fewer than two models completed; failures: "
            + "; ".join(f"{k}: {v}" for k, v in failures.items())
        )
    ranked = rank_models(summaries)
    echo = echo_header_lines(config, config["seed"],
                             extra=_provenance_echo(bundle))
    rows = [[r.rank, r.summary.model_label, r.summary.dic, r.summary.d_bar,
             r.summary.d_at_mean, r.summary.p_d, r.delta_dic]
            for r in ranked]
    write_table(out / "dic_comparison.csv",
                ["rank", "model", "dic", "d_bar", "d_at_mean", "p_d",
                 "delta_dic"], rows, echo)
    if failures:
        write_json(out / "compare_failures.json",
                   {"config": config.echo_dict(), "failures": failures})
    return ranked


def cmd_simstudy(config, out_dir):
    """Run the configured recovery study and write its report."""
    out = Path(out_dir)
    design = config.trial_design()
    report = run_replications(design, config["sim_n_reps"],
                              config.hyperpriors(), config.mcmc(),
                              threads=config["threads"],
                              integrator=config.integrator())
    echo = echo_header_lines(config, config["seed"])
    rows = [[name, report.tv[j], report.me[j], report.rb_pct[j],
             report.se_pct[j], report.estimates.shape[0]]
            for j, name in enumerate(report.param_names)]
    write_table(out / "recovery_report.csv",
                ["parameter", "tv", "me", "rb_pct", "se_pct", "n_reps_ok"],
                rows, echo)
    rows = [[r] + list(report.estimates[r])
            for r in range(report.estimates.shape[0])]
    write_table(out / "replication_estimates.csv",
                ["replication"] + [f"mu_{k}" for k in MU_LABELS], rows, echo)
    if report.failed:
        write_json(out / "simstudy_failures.json",
                   {"config": config.echo_dict(),
                    "failures": {str(r): m for r, m in report.failed}})
    return report


def cmd_summarize_adherence(bundle, config, out_dir, labels=None):
    """Write per-subject per-visit adherence rates for the window metrics."""
    out = Path(out_dir)
    if labels is None:
        labels = [m for m in config["metrics"] if m != "control"]
        if not labels:
            labels = list(METRIC_NAMES)
    bad = [m for m in labels if m not in METRICS]
    if bad:
        raise ValidationError(f"unknown metric labels: {', '.join(bad)}")

    echo = echo_header_lines(config, config["seed"],
                             extra=_provenance_echo(bundle))
    rate_rows = []
    window_rows = []
    for sid in bundle.subject_ids:
        rec = bundle.records[sid]
        schedule = VisitSchedule(tuple(int(d) for d in rec.days))
        if rec.mems:
            log = next(iter(rec.mems.values()))
        else:
            raise ValidationError(f"subject {sid} has no MEMS events")
        per_metric = {m: visit_rates(log, schedule, METRICS[m])
                      for m in labels}
        for k in range(1, len(schedule.visit_days)):
            row = [sid, schedule.visit_days[k]]
            row += [per_metric[m][k - 1][0] for m in labels]
            row += [int(per_metric[m][k - 1][1]) for m in labels]
            rate_rows.append(row)
            for m in labels:
                window = window_for_visit(METRICS[m], schedule, k)
                if window is None:
                    window_rows.append([sid, m, schedule.visit_days[k],
                                        None, None])
                else:
                    window_rows.append([sid, m, schedule.visit_days[k],
                                        window[0], window[1]])

    write_table(out / "adherence_rates.csv",
                ["subject_id", "visit_day"] + list(labels)
                + [f"carried_{m}" for m in labels], rate_rows, echo)
    write_table(out / "adherence_windows.csv",
                ["subject_id", "metric", "visit_day", "start_day", "end_day"],
                window_rows, echo)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="hivdyn",
        description="Viral-dynamics model fitting, adherence-metric "
                    "comparison, and simulation studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data-dir", required=True,
                           help="directory with the four input CSVs")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="override the config thread count")

    common(sub.add_parser("fit", help="fit one model"))
    common(sub.add_parser("compare", help="DIC comparison across models"))
    common(sub.add_parser("simstudy", help="parameter-recovery study"),
           data=False)
    common(sub.add_parser("summarize-adherence",
                          help="per-visit adherence rate table"))
    return parser


def _load_config(args):
    config = parse_config(args.config) if args.config else default_config()
    return config.with_overrides(seed=args.seed, threads=args.threads)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "simstudy":
            cmd_simstudy(config, args.out_dir)
        else:
            bundle = load_bundle(
                args.data_dir,
                censor_enabled=config["censor_enabled"],
                censor_limit_copies=config["censor_limit_copies"],
                censor_replace_copies=config["censor_replace_copies"],
                doses_per_day=config["doses_per_day"],
            )
            if args.command == "fit":
                cmd_fit(bundle, config, args.out_dir)
            elif args.command == "compare":
                cmd_compare(bundle, config, args.out_dir)
            else:
                cmd_summarize_adherence(bundle, config, args.out_dir)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
