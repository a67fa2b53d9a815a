"""Synthetic-trial generation and recovery scoring."""

import math

import numpy as np
import pytest

from hivdyn.errors import StudyError
from hivdyn.sampler import Hyperpriors, McmcConfig, predict_log10_vl
from hivdyn.simstudy import (
    DEFAULT_TRUE_MU,
    RecoveryReport,
    SyntheticSource,
    TrialDesign,
    generate_trial,
    run_replications,
)


class TestGenerateTrial:
    def test_default_true_values(self):
        design = TrialDesign()
        np.testing.assert_allclose(
            design.true_mu,
            (0.767, -0.977, -4.086, 0.433, 1.040, -2.615, -0.670, 0.719),
        )

    def test_shapes_and_schedule(self):
        design = TrialDesign(n_subjects=4, seed=1)
        obs = generate_trial(design)
        assert obs.n == 4
        assert obs.total_obs == 4 * 13
        np.testing.assert_allclose(obs.subjects[0].times[:4],
                                   [0.0, 14.0, 28.0, 56.0])
        assert obs.subjects[0].times[-1] == 7.0 * 72

    def test_seed_determinism(self):
        design = TrialDesign(n_subjects=3, seed=9)
        a = generate_trial(design)
        b = generate_trial(design)
        for sa, sb in zip(a.subjects, b.subjects):
            assert np.array_equal(sa.y, sb.y)
            assert np.array_equal(sa.seg_coef, sb.seg_coef)
            assert sa.covariates == sb.covariates

    def test_rep_index_changes_data(self):
        design = TrialDesign(n_subjects=3, seed=9)
        a = generate_trial(design, rep_index=0)
        b = generate_trial(design, rep_index=1)
        assert not np.array_equal(a.subjects[0].y, b.subjects[0].y)

    def test_degenerate_design_is_noiseless_and_identical(self):
        source = SyntheticSource(
            adherence_constant=0.8,
            covariate_sd=0.0,
            ic50_log_s0_sd=0.0,
            ic50_log_fold_sd=0.0,
            tf_day_range=(200.0, 200.0),
        )
        design = TrialDesign(n_subjects=3, seed=2,
                             true_sigma=np.zeros((6, 6)),
                             true_sigma_sq=0.0, source=source)
        obs = generate_trial(design)
        y0 = obs.subjects[0].y
        for subj in obs.subjects[1:]:
            np.testing.assert_array_equal(subj.y, y0)
        # noiseless: observations equal the population-mean trajectory
        f = predict_log10_vl(obs.subjects[0].true_theta, obs.subjects[0])
        np.testing.assert_array_equal(y0, f)
        pm = design.true_mu[:6].copy()
        np.testing.assert_array_equal(obs.subjects[0].true_theta, pm)

    def test_reproductive_ratio_redraws(self):
        # forcing log R below zero in the generator must redraw, then fail
        design = TrialDesign(
            n_subjects=1, seed=3,
            true_mu=np.array([0.767, -0.977, -4.086, 0.433, -5.0,
                              -2.615, -0.670, 0.719]),
            true_sigma=np.diag(np.full(6, 1e-6)),
        )
        with pytest.raises(StudyError, match="redraws"):
            generate_trial(design)

    def test_censoring_floor(self):
        source = SyntheticSource(adherence_constant=1.0,
                                 ic50_log_s0_mean=math.log(2.0),
                                 ic50_log_s0_sd=0.0, ic50_log_fold_sd=0.0)
        design = TrialDesign(n_subjects=2, seed=4, source=source,
                             censor=True)
        obs = generate_trial(design)
        floor = math.log10(25.0)
        limit = math.log10(50.0)
        for subj in obs.subjects:
            assert np.all((subj.y >= limit) | (subj.y == floor))

    def test_noise_variance_matches_generator(self):
        source = SyntheticSource(adherence_constant=0.8, covariate_sd=0.0,
                                 ic50_log_s0_sd=0.0, ic50_log_fold_sd=0.0,
                                 tf_day_range=(200.0, 200.0))
        design = TrialDesign(n_subjects=800, seed=5,
                             true_sigma=np.zeros((6, 6)),
                             true_sigma_sq=0.25, source=source)
        obs = generate_trial(design)
        f = predict_log10_vl(obs.subjects[0].true_theta, obs.subjects[0])
        resid = np.concatenate([s.y - f for s in obs.subjects])
        assert resid.size >= 10000
        assert np.var(resid) == pytest.approx(0.25, rel=0.05)


class TestRecoveryReport:
    def test_hand_arithmetic(self):
        report = RecoveryReport.from_estimates(
            tv=np.ones(8),
            estimates=np.stack([np.full(8, 1.1), np.full(8, 0.9)]),
        )
        np.testing.assert_allclose(report.me, np.ones(8))
        np.testing.assert_allclose(report.rb_pct, np.zeros(8), atol=1e-12)
        np.testing.assert_allclose(report.se_pct, np.full(8, 10.0),
                                   rtol=1e-12)

    def test_recomputation_from_stored_estimates_is_exact(self):
        rng = np.random.default_rng(3)
        tv = np.array(DEFAULT_TRUE_MU)
        est = tv + rng.normal(0, 0.2, size=(6, 8))
        report = RecoveryReport.from_estimates(tv, est)
        me = est.mean(axis=0)
        np.testing.assert_array_equal(report.me, me)
        np.testing.assert_array_equal(
            report.rb_pct, 100.0 * (me - tv) / np.abs(tv))
        np.testing.assert_array_equal(
            report.se_pct,
            100.0 * np.sqrt(np.mean((est - tv) ** 2, axis=0)) / np.abs(tv))

    def test_largest_error_labels(self):
        tv = np.ones(8)
        est = np.ones((2, 8))
        est[0, 3] = 2.0   # log_rho off by 100%
        est[1, 0] = 0.0   # log_c off by 100%
        report = RecoveryReport.from_estimates(tv, est)
        assert report.largest_error_param_per_rep() == ["log_rho", "log_c"]


class TestRunReplications:
    def test_smoke_run_and_determinism(self):
        design = TrialDesign(n_subjects=3, seed=21)
        cfg = McmcConfig(burn_in=60, keep_every=2, n_kept=30, seed=0,
                         adapt_window=20)
        a = run_replications(design, 2, Hyperpriors(), cfg)
        b = run_replications(design, 2, Hyperpriors(), cfg)
        np.testing.assert_array_equal(a.estimates, b.estimates)
        assert a.estimates.shape == (2, 8)
        assert a.n_reps == 2
        assert not a.failed

    def test_parallel_equals_serial(self):
        design = TrialDesign(n_subjects=2, seed=22)
        cfg = McmcConfig(burn_in=40, keep_every=2, n_kept=20, seed=0,
                         adapt_window=20)
        serial = run_replications(design, 2, Hyperpriors(), cfg, threads=1)
        parallel = run_replications(design, 2, Hyperpriors(), cfg, threads=2)
        np.testing.assert_array_equal(serial.estimates, parallel.estimates)

    def test_rejects_zero_reps(self):
        with pytest.raises(StudyError):
            run_replications(TrialDesign(n_subjects=2), 0, Hyperpriors(),
                             McmcConfig(burn_in=10, keep_every=1, n_kept=5))
