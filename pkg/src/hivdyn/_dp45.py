"""Adaptive Dormand-Prince 5(4) stepper for piecewise-smooth right-hand sides.

This is the generic (pure Python) integrator used by the public API, where
the efficacy input is an arbitrary callable. The MCMC hot path uses the
compiled twin in :mod:`hivdyn._fastsolve`, which shares the same tableau and
step-control logic.

Discontinuity points of the right-hand side are treated as hard restart
points: no step ever straddles one, which preserves the order of accuracy.
Requested output times are landing points (no dense-output interpolation).
"""

from __future__ import annotations

import numpy as np

from .errors import IntegrationError, NumericalInstabilityError

# Dormand-Prince 5(4) tableau. The fifth-order solution is propagated; the
# difference against the embedded fourth-order solution drives step control.
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = (
    9017 / 3168,
    -355 / 33,
    46732 / 5247,
    49 / 176,
    -5103 / 18656,
)
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = (
    71 / 57600,
    -71 / 16695,
    71 / 1920,
    -17253 / 339200,
    22 / 525,
    -1 / 40,
)

MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
SAFETY = 0.9
# h below this fraction of the local time scale means the controller stalled
UNDERFLOW_FRACTION = 1e-13
# Undershoot below zero within this multiple of the per-component error
# scale is roundoff from a decaying component and is clamped; anything
# deeper is a genuine instability. The step controller itself permits local
# errors up to ~sqrt(3) error scales, so the multiplier leaves headroom.
NEG_CLAMP_FACTOR = 10.0

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_NEGATIVE = 2


def merge_breakpoints(breakpoints, t_end):
    """Interior discontinuity points clipped to (0, t_end), as segment bounds
    [0, b1, ..., t_end]."""
    interior = sorted({float(b) for b in breakpoints if 0.0 < b < t_end})
    return np.array([0.0] + interior + [float(t_end)])


def _initial_step(rhs, t0, y0, f0, rtol, atol, h_max):
    scale = atol + rtol * np.abs(y0)
    d0 = np.max(np.abs(y0) / scale)
    d1 = np.max(np.abs(f0) / scale)
    if d1 > 1e-10:
        h = 0.01 * d0 / d1
    else:
        h = 1e-3
    return min(h, h_max)


def integrate_piecewise(rhs, y0, times, breakpoints, rtol, atol, max_step,
                        nonneg=True):
    """Integrate ``y' = rhs(t, y)`` from t=0, restarting at each breakpoint.

    Parameters
    ----------
    rhs : callable ``(t, y) -> ndarray``
        Right-hand side; must be smooth between consecutive breakpoints.
    y0 : ndarray
        State at t=0.
    times : ndarray
        Nondecreasing output times, all >= 0.
    breakpoints : sequence of float
        Interior discontinuity times of ``rhs``.
    rtol, atol, max_step : float
        Step-control parameters.
    nonneg : bool
        Clamp roundoff-negative components (|value| < atol) to zero and
        treat anything more negative as an instability.

    Returns
    -------
    ndarray of shape ``(len(times), len(y0))``.
    """
    y = np.asarray(y0, dtype=float).copy()
    times = np.asarray(times, dtype=float)
    n_out = times.shape[0]
    out = np.empty((n_out, y.shape[0]))
    if n_out == 0:
        return out
    if times[0] < 0.0 or np.any(np.diff(times) < 0.0):
        raise ValueError("output times must be nondecreasing and >= 0")

    t = 0.0
    i_out = 0
    while i_out < n_out and times[i_out] <= t:
        out[i_out] = y
        i_out += 1
    if i_out == n_out:
        return out

    bounds = merge_breakpoints(breakpoints, times[-1])
    for s in range(bounds.shape[0] - 1):
        t_hi = bounds[s + 1]
        if t >= t_hi:
            continue
        t, y, i_out, status = _run_segment(
            rhs, t, y, t_hi, times, i_out, out, rtol, atol, max_step, nonneg
        )
        if status == STATUS_UNDERFLOW:
            raise IntegrationError("step size underflow", t_fail=t)
        if status == STATUS_NEGATIVE:
            raise NumericalInstabilityError(
                "state component negative beyond tolerance", t_fail=t
            )
    return out


def _run_segment(rhs, t, y, t_hi, times, i_out, out, rtol, atol, max_step,
                 nonneg):
    n_out = times.shape[0]
    k1 = np.asarray(rhs(t, y), dtype=float)
    h = _initial_step(rhs, t, y, k1, rtol, atol, min(t_hi - t, max_step))
    while t < t_hi:
        t_stop = min(t_hi, times[i_out]) if i_out < n_out else t_hi
        if t + h >= t_stop:
            h_step = t_stop - t
            landing = True
        else:
            h_step = h
            landing = False

        y2 = y + h_step * (A21 * k1)
        k2 = rhs(t + C2 * h_step, y2)
        y3 = y + h_step * (A31 * k1 + A32 * k2)
        k3 = rhs(t + C3 * h_step, y3)
        y4 = y + h_step * (A41 * k1 + A42 * k2 + A43 * k3)
        k4 = rhs(t + C4 * h_step, y4)
        y5 = y + h_step * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4)
        k5 = rhs(t + C5 * h_step, y5)
        y6 = y + h_step * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5)
        k6 = rhs(t + h_step, y6)
        y_new = y + h_step * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6)
        k7 = rhs(t + h_step, y_new)

        err = h_step * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))

        if err_norm <= 1.0:
            t = t_stop if landing else t + h_step
            if nonneg:
                neg = y_new < 0.0
                if np.any(neg):
                    floor = -NEG_CLAMP_FACTOR * (atol + rtol * np.abs(y))
                    if np.any(y_new[neg] < floor[neg]):
                        return t, y_new, i_out, STATUS_NEGATIVE
                    y_new = np.where(neg, 0.0, y_new)
            y = y_new
            k1 = np.asarray(k7, dtype=float)
            while i_out < n_out and times[i_out] <= t:
                out[i_out] = y
                i_out += 1
            if err_norm > 1e-30:
                factor = min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err_norm ** -0.2))
            else:
                factor = MAX_FACTOR
            h = min(max(h, h_step) * factor, max_step)
        else:
            h = h_step * max(MIN_FACTOR, SAFETY * err_norm ** -0.2)
        if h < UNDERFLOW_FRACTION * max(1.0, abs(t)):
            return t, y, i_out, STATUS_UNDERFLOW
    return t, y, i_out, STATUS_OK
