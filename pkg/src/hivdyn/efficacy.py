"""Time-varying drug efficacy.

Efficacy for a two-drug regimen follows a saturating dose-effect form in
which the "dose" is adherence divided by the log-scale inhibitory
concentration of each drug::

    gamma(t) = u(t) / (phi + u(t)),
    u(t) = A1(t)/IC50_1(t) + A2(t)/IC50_2(t),
    phi = exp(beta0 + beta1*w1 + beta2*w2)

``A_k`` is a step function of per-interval adherence rates, ``IC50_k(t)``
is the natural log of a linearly rising inhibitory concentration (resistance
growth between baseline and failure time), and ``(w1, w2)`` are standardized
baseline log10 viral load and CD4 count. Larger ``phi`` means poorer
in-vitro-to-in-vivo conversion, hence lower efficacy.

The control (covariate- and adherence-blind) model fixes both adherence
terms at 1 and both concentration logs at 1, giving the constant
``2 / (exp(beta0) + 2)``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateCovariateError,
    DegenerateIc50Error,
    DomainError,
    ProfileRangeError,
)

#: The linear concentration interpolant must exceed this so its natural log
#: stays strictly positive and gamma stays inside [0, 1).
IC50_CONCENTRATION_GUARD = 1.0001


@dataclass(frozen=True)
class Ic50Trajectory:
    """Baseline/failure inhibitory-concentration pair.

    Concentration rises linearly from ``s0`` at t=0 to ``sf`` at the failure
    time ``tf`` and stays at ``sf`` afterwards; with no observed failure
    (``tf`` is None) it is constant at ``s0``. Evaluation returns the
    natural log of the concentration.
    """

    s0: float
    sf: float | None = None
    tf: float | None = None

    def __post_init__(self):
        if not (self.s0 > 0 and math.isfinite(self.s0)):
            raise DomainError(f"s0 must be positive, got {self.s0!r}")
        if self.tf is not None:
            if not (self.tf > 0 and math.isfinite(self.tf)):
                raise DomainError(f"tf must be positive, got {self.tf!r}")
            if self.sf is None or not (self.sf > 0 and math.isfinite(self.sf)):
                raise DomainError("sf must be positive when tf is present")


@dataclass(frozen=True)
class AdherenceProfile:
    """Step function of adherence rates on the visit grid.

    ``rates[k]`` applies on the left-open interval ``(knots[k], knots[k+1]]``;
    t=0 maps into the first interval.
    """

    knots: tuple
    rates: tuple

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        rates = tuple(float(r) for r in self.rates)
        if len(knots) < 2:
            raise DomainError("profile needs at least two knots")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise DomainError("knots must be strictly increasing")
        if len(rates) != len(knots) - 1:
            raise DomainError("need exactly one rate per interval")
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise DomainError("rates must lie in [0, 1]")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "rates", rates)

    @property
    def span(self):
        return self.knots[0], self.knots[-1]


@dataclass(frozen=True)
class CovariatePair:
    """Standardized baseline covariates: log10 viral load and CD4 count."""

    w1: float
    w2: float

    def __post_init__(self):
        if not (math.isfinite(self.w1) and math.isfinite(self.w2)):
            raise DomainError("covariates must be finite")


@dataclass(frozen=True)
class CovariateTransform:
    """Cohort means and sample SDs used to standardize raw covariates."""

    means: tuple
    sds: tuple


@dataclass(frozen=True)
class EfficacyInputs:
    """Everything subject-specific that enters gamma(t) besides phi."""

    adherence1: AdherenceProfile
    adherence2: AdherenceProfile
    ic50_1: Ic50Trajectory
    ic50_2: Ic50Trajectory
    covariates: CovariatePair


def eval_ic50(traj, t):
    """Natural log of the interpolated inhibitory concentration at day t."""
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t!r}")
    if traj.tf is None or traj.sf == traj.s0:
        conc = traj.s0
    elif t >= traj.tf:
        conc = traj.sf
    else:
        conc = traj.s0 + (traj.sf - traj.s0) / traj.tf * t
    if conc <= IC50_CONCENTRATION_GUARD:
        raise DegenerateIc50Error(
            f"IC50 concentration {conc:g} at t={t:g} is at or below the "
            f"guard {IC50_CONCENTRATION_GUARD}; log-scale efficacy undefined"
        )
    return math.log(conc)


def eval_adherence(profile, t):
    """Adherence rate of the interval containing t (left-open, right-closed)."""
    lo, hi = profile.span
    if t < lo or t > hi:
        raise ProfileRangeError(
            f"t={t:g} outside adherence profile span [{lo:g}, {hi:g}]"
        )
    if t <= lo:
        return profile.rates[0]
    idx = bisect.bisect_left(profile.knots, t) - 1
    return profile.rates[idx]


def phi_from_beta(beta, covariates):
    """Efficacy conversion factor exp(beta0 + beta1*w1 + beta2*w2)."""
    b0, b1, b2 = beta
    return math.exp(b0 + b1 * covariates.w1 + b2 * covariates.w2)


def gamma(inputs, beta, t):
    """Two-drug efficacy at day t for population-level coefficients beta."""
    return gamma_at_phi(inputs, phi_from_beta(beta, inputs.covariates), t)


def gamma_at_phi(inputs, phi, t):
    """Two-drug efficacy at day t given the conversion factor directly.

    This is the subject-level form used inside the sampler, where phi comes
    from the subject's own log-phi parameter rather than from beta.
    """
    if not phi > 0:
        raise DomainError(f"phi must be positive, got {phi!r}")
    u = 0.0
    a1 = eval_adherence(inputs.adherence1, t)
    if a1 > 0.0:
        u += a1 / eval_ic50(inputs.ic50_1, t)
    a2 = eval_adherence(inputs.adherence2, t)
    if a2 > 0.0:
        u += a2 / eval_ic50(inputs.ic50_2, t)
    return u / (phi + u)


def gamma_control(beta0, t=0.0):
    """Constant efficacy of the adherence/resistance/covariate-blind model."""
    if not math.isfinite(beta0):
        raise DomainError("beta0 must be finite")
    return 2.0 / (math.exp(beta0) + 2.0)


def standardize_covariates(raw):
    """Center and scale raw (baseline log10 VL, baseline CD4) pairs.

    Uses cohort mean and sample (n-1) SD per column. Returns the
    standardized pairs plus the transform for report labeling.
    """
    arr = np.asarray(raw, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise DegenerateCovariateError(
            "need at least two (viral load, CD4) pairs"
        )
    means = arr.mean(axis=0)
    sds = arr.std(axis=0, ddof=1)
    if np.any(sds <= 0) or not np.all(np.isfinite(sds)):
        raise DegenerateCovariateError(
            f"covariate SDs must be positive, got {tuple(sds)}"
        )
    z = (arr - means) / sds
    pairs = [CovariatePair(float(w1), float(w2)) for w1, w2 in z]
    return pairs, CovariateTransform(tuple(means), tuple(sds))


# ---------------------------------------------------------------------------
# Compiled-segment form consumed by the fast solver.
# ---------------------------------------------------------------------------

def _ic50_segment_coeffs(traj, t_mid):
    """Linear concentration coefficients (c, d) on a segment: conc = c + d*t."""
    if traj.tf is None or traj.sf == traj.s0:
        return traj.s0, 0.0
    if t_mid >= traj.tf:
        return traj.sf, 0.0
    return traj.s0, (traj.sf - traj.s0) / traj.tf


def _check_guard(traj, t_lo, t_hi, label):
    # Concentration is linear on the segment, so endpoint checks suffice.
    for t in (t_lo, t_hi):
        t_mid = 0.5 * (t_lo + t_hi)
        c0, d0 = _ic50_segment_coeffs(traj, t_mid)
        if c0 + d0 * t <= IC50_CONCENTRATION_GUARD:
            raise DegenerateIc50Error(
                f"{label}: IC50 concentration {c0 + d0 * t:g} at t={t:g} "
                f"is at or below the guard {IC50_CONCENTRATION_GUARD}"
            )


def compile_efficacy(inputs, t_end, label="subject"):
    """Flatten efficacy inputs into the per-segment arrays the compiled
    solver consumes.

    Returns ``(seg_bounds, seg_coef)``; see :mod:`hivdyn._fastsolve` for the
    row layout. Raises if the adherence profiles do not span ``[0, t_end]``
    or an IC50 interpolant violates the lower guard anywhere.
    """
    for name, prof in (("drug-1", inputs.adherence1),
                       ("drug-2", inputs.adherence2)):
        lo, hi = prof.span
        if lo > 0.0 or hi < t_end:
            raise DomainError(
                f"{label}: {name} adherence profile [{lo:g}, {hi:g}] does "
                f"not span the observation window [0, {t_end:g}]"
            )
    cuts = {0.0, float(t_end)}
    for prof in (inputs.adherence1, inputs.adherence2):
        cuts.update(k for k in prof.knots if 0.0 < k < t_end)
    for traj in (inputs.ic50_1, inputs.ic50_2):
        if traj.tf is not None and 0.0 < traj.tf < t_end:
            cuts.add(float(traj.tf))
    bounds = np.array(sorted(cuts))

    n_seg = bounds.shape[0] - 1
    coef = np.empty((n_seg, 7))
    for s in range(n_seg):
        t_lo, t_hi = bounds[s], bounds[s + 1]
        t_mid = 0.5 * (t_lo + t_hi)
        _check_guard(inputs.ic50_1, t_lo, t_hi, label)
        _check_guard(inputs.ic50_2, t_lo, t_hi, label)
        c1, d1 = _ic50_segment_coeffs(inputs.ic50_1, t_mid)
        c2, d2 = _ic50_segment_coeffs(inputs.ic50_2, t_mid)
        coef[s] = (
            eval_adherence(inputs.adherence1, t_hi), c1, d1,
            eval_adherence(inputs.adherence2, t_hi), c2, d2,
            -1.0,
        )
    return bounds, coef


def compile_control(t_end):
    """Segment arrays for the control model: u(t) = 2 exactly.

    Both adherence terms are 1 and both concentration logs are exactly 1
    (log of e), so gamma reduces to 2/(phi + 2).
    """
    bounds = np.array([0.0, float(t_end)])
    coef = np.array([[1.0, math.e, 0.0, 1.0, math.e, 0.0, -1.0]])
    return bounds, coef


def compile_constant_gamma(bounds, values):
    """Segment arrays for a directly specified piecewise-constant gamma."""
    bounds = np.asarray(bounds, dtype=float)
    values = np.asarray(values, dtype=float)
    if bounds.shape[0] != values.shape[0] + 1:
        raise DomainError("need one gamma value per segment")
    if np.any(values < 0.0) or np.any(values > 1.0):
        raise DomainError("gamma values must lie in [0, 1]")
    coef = np.zeros((values.shape[0], 7))
    coef[:, 6] = values
    return bounds, coef
