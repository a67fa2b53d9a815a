"""Viral-dynamics ODE core.

Two equivalent formulations of the target-cell-limited infection model under
time-varying drug efficacy ``gamma(t)``:

* the rescaled, identifiable system in dimensionless variables
  ``(T, T*, V)`` with parameters ``(c, delta, d_T, R)``, which is what gets
  fitted, and
* the unscaled system in natural units with parameters
  ``(lambda, d_T, k, delta, N, c)``, kept purely as a cross-check oracle:
  rescaling its trajectories must reproduce the identifiable system.

The rescaled system::

    dT/dt  = d_T * (1 - T - (1 - gamma(t)) * T * V)
    dT*/dt = delta * ((1 - gamma(t)) * T * V - T*)
    dV/dt  = c * (R * T* - V)

starts from the pre-treatment steady state implied by the initial viral
level ``V0``: ``T0 = 1/(1+V0)``, ``T*0 = V0/(1+V0)``.

Observed viral load relates to the dimensionless solution through the
scaling factor ``rho`` (in units of 10,000 copies/ml):
``log10 VL = log10(rho * 1e4 * V)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._dp45 import integrate_piecewise
from .errors import DomainError

#: Dimensionless viral levels below this are clamped before taking log10 in
#: the observation map, so proposals that drive the virus extinct produce a
#: finite (terrible) likelihood instead of -inf.
V_TILDE_FLOOR = 1e-12

#: The scaling factor rho is expressed in units of 10,000 copies/ml.
RHO_UNIT_COPIES_PER_ML = 1.0e4


@dataclass(frozen=True)
class ScaledState:
    """Dimensionless state: target cells, infected cells, free virus."""

    t_tilde: float
    ts_tilde: float
    v_tilde: float

    def as_array(self):
        return np.array([self.t_tilde, self.ts_tilde, self.v_tilde])


@dataclass(frozen=True)
class SubjectParams:
    """Subject-level dynamic parameters, all on natural-log scale.

    Order matches the subject parameter vector used by the sampler:
    ``(log_c, log_delta, log_dT, log_rho, log_R, log_phi)``.
    """

    log_c: float
    log_delta: float
    log_dT: float
    log_rho: float
    log_R: float
    log_phi: float

    def __post_init__(self):
        for name in ("log_c", "log_delta", "log_dT", "log_rho", "log_R",
                     "log_phi"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")

    def as_array(self):
        return np.array([self.log_c, self.log_delta, self.log_dT,
                         self.log_rho, self.log_R, self.log_phi])

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class UnscaledParams:
    """Natural-unit parameters of the unscaled oracle system.

    ``lam``: target-cell production (cells/ml/day), ``d_T``: target-cell
    death rate, ``k``: infection rate (ml/copies/day), ``delta``:
    infected-cell death rate, ``n_burst``: virions produced per infected
    cell, ``c``: virion clearance rate.
    """

    lam: float
    d_T: float
    k: float
    delta: float
    n_burst: float
    c: float

    def __post_init__(self):
        for name in ("lam", "d_T", "k", "delta", "n_burst", "c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be finite and positive")

    @property
    def reproductive_ratio(self):
        """Basic reproductive ratio R = k*N*lambda / (c*d_T)."""
        return self.k * self.n_burst * self.lam / (self.c * self.d_T)


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-10
    max_step: float = math.inf
    breakpoints: tuple = field(default=())

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise DomainError("tolerances must be positive")
        bp = tuple(float(b) for b in self.breakpoints)
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise DomainError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)


DEFAULT_INTEGRATOR = IntegratorConfig()


def steady_state_init(v0_tilde):
    """Pre-treatment steady state implied by the initial viral level.

    ``T0 + T*0 == 1`` exactly (the infected fraction is computed as the
    floating-point complement of the target fraction).
    """
    if not (isinstance(v0_tilde, (int, float)) and math.isfinite(v0_tilde)
            and v0_tilde > 0):
        raise DomainError(f"initial viral level must be finite and positive, "
                          f"got {v0_tilde!r}")
    t0 = 1.0 / (1.0 + v0_tilde)
    return ScaledState(t0, 1.0 - t0, float(v0_tilde))


def _checked_gamma(efficacy):
    def gamma(t):
        g = efficacy(t)
        if not -1e-9 <= g <= 1.0 + 1e-9:
            raise DomainError(f"efficacy gamma({t}) = {g} outside [0, 1]")
        return g

    return gamma


def integrate_scaled(params, efficacy, v0_tilde, times, cfg=DEFAULT_INTEGRATOR):
    """Solve the rescaled system at the requested times.

    ``efficacy`` is any callable ``t -> gamma(t)`` in [0, 1], piecewise
    continuous with discontinuities only at ``cfg.breakpoints``. Integration
    restarts at each breakpoint so no step straddles a jump.
    """
    c = math.exp(params.log_c)
    delta = math.exp(params.log_delta)
    d_t = math.exp(params.log_dT)
    big_r = math.exp(params.log_R)
    gamma = _checked_gamma(efficacy)

    def rhs(t, y):
        g = gamma(t)
        infect = (1.0 - g) * y[0] * y[2]
        return np.array([
            d_t * (1.0 - y[0] - infect),
            delta * (infect - y[1]),
            c * (big_r * y[1] - y[2]),
        ])

    y0 = steady_state_init(v0_tilde).as_array()
    sol = integrate_piecewise(rhs, y0, np.asarray(times, dtype=float),
                              cfg.breakpoints, cfg.rel_tol, cfg.abs_tol,
                              cfg.max_step)
    return [ScaledState(*row) for row in sol]


def integrate_unscaled(params, efficacy, initial, times,
                       cfg=DEFAULT_INTEGRATOR):
    """Solve the natural-unit oracle system from an arbitrary state.

    ``initial`` is ``(T, T*, V)`` in cells/ml and copies/ml. Used to verify
    that rescaling by ``T~=(d_T/lam)T, T*~=(delta/lam)T*, V~=(k/d_T)V``
    reproduces the identifiable system.
    """
    y0 = np.asarray(initial, dtype=float)
    if y0.shape != (3,) or np.any(y0 < 0) or not np.all(np.isfinite(y0)):
        raise DomainError("initial state must be three finite nonnegative "
                          "components")
    lam, d_t, k, delta, n_burst, c = (params.lam, params.d_T, params.k,
                                      params.delta, params.n_burst, params.c)
    gamma = _checked_gamma(efficacy)

    def rhs(t, y):
        infect = (1.0 - gamma(t)) * k * y[0] * y[2]
        return np.array([
            lam - d_t * y[0] - infect,
            infect - delta * y[1],
            n_burst * delta * y[1] - c * y[2],
        ])

    sol = integrate_piecewise(rhs, y0, np.asarray(times, dtype=float),
                              cfg.breakpoints, cfg.rel_tol, cfg.abs_tol,
                              cfg.max_step)
    return [tuple(row) for row in sol]


def rescale_state(params, state):
    """Map a natural-unit ``(T, T*, V)`` to dimensionless coordinates."""
    t, ts, v = state
    return ScaledState(params.d_T / params.lam * t,
                       params.delta / params.lam * ts,
                       params.k / params.d_T * v)


def unscale_state(params, state):
    """Inverse of :func:`rescale_state`."""
    return (params.lam / params.d_T * state.t_tilde,
            params.lam / params.delta * state.ts_tilde,
            params.d_T / params.k * state.v_tilde)


def observed_log10_vl(params, v_tilde):
    """Observation map: dimensionless viral level to log10 copies/ml.

    Callers responsible for likelihood evaluation must clamp ``v_tilde`` at
    :data:`V_TILDE_FLOOR` first; this function refuses nonpositive input.
    """
    if not (v_tilde > 0 and math.isfinite(v_tilde)):
        raise DomainError(f"viral level must be positive, got {v_tilde!r}")
    return math.log10(math.exp(params.log_rho) * RHO_UNIT_COPIES_PER_ML
                      * v_tilde)
