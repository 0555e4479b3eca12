"""Generators, experiment drivers, accuracy and value evaluation."""

import numpy as np
import pytest
from scipy.stats import norm

from dtrcal import simlab
from dtrcal.data_model import SourceKind
from dtrcal.errors import ConfigError, MissingSource
from dtrcal.qlearning import fit_qlearning, policy_actions


def closed_form_optimal_value():
    # 3 + 2 * E[max(0.5 - X, 0)] with X ~ N(1, 1):
    # E[(c - X)^+] = (c - mu) * Phi((c - mu)/s) + s * phi((c - mu)/s)
    c, mu, s = 0.5, 1.0, 1.0
    partial = (c - mu) * norm.cdf((c - mu) / s) + s * norm.pdf((c - mu) / s)
    return 3.0 + 2.0 * partial


class TestConfigValidation:
    def test_rejects_bad_stage_count(self):
        with pytest.raises(ConfigError):
            simlab.DgpConfig(n=10, stages=3, sigma=(0.5, 0.5, 0.5))

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ConfigError):
            simlab.one_stage_config(n=10, sigma=0.0)

    def test_rejects_bad_missing_rate(self):
        with pytest.raises(ConfigError):
            simlab.two_stage_config(n=10, missing_rate_third_replicate=1.5)

    def test_rejects_wrong_psi_length(self):
        with pytest.raises(ConfigError):
            simlab.one_stage_config(n=10, true_psi=(1.0, 2.0, 3.0))

    def test_seed_required(self):
        with pytest.raises(ConfigError):
            simlab.simulate_cohort(simlab.one_stage_config(n=10))


class TestOneStageGenerator:
    def test_zero_error_limit(self):
        cfg = simlab.one_stage_config(n=200, sigma=1e-12)
        cohort = simlab.simulate_cohort(cfg, seed=0)
        w = cohort.stage1.w
        x = cohort.stage1.x
        assert np.allclose(w[:, 0, 0], x[:, 0], atol=1e-9)
        assert np.allclose(w[:, 0, 1], x[:, 0], atol=1e-9)

    def test_covariate_means_within_clt_bounds(self):
        n = 100_000
        cohort = simlab.simulate_cohort(simlab.one_stage_config(n=n, sigma=0.9), seed=1)
        bound = 3.0 / np.sqrt(n)
        assert abs(cohort.stage1.x.mean() - 1.0) < bound
        assert abs(cohort.stage1.z.mean() - 1.0) < bound

    def test_outcome_mean_under_control_matches_formula(self):
        n = 100_000
        cohort = simlab.simulate_cohort(simlab.one_stage_config(n=n, sigma=0.5), seed=2)
        control = cohort.stage1.a == 0
        # E[Y | A=0] = 0.5 + 0.5 * E[Z] + E[X] = 2.0; Var(Y|A=0) = 0.25 + 1 + 1
        bound = 3.0 * np.sqrt(2.25) / np.sqrt(control.sum())
        assert abs(cohort.y[control].mean() - 2.0) < bound

    def test_records_api_round_trip(self):
        records = simlab.simulate_one_stage(simlab.one_stage_config(n=25), seed=3)
        assert len(records) == 25
        assert all(r.n_stages == 1 for r in records)
        assert all(r.stages[0].true_covariate is not None for r in records)


class TestTwoStageGenerator:
    def test_full_missingness_gives_two_replicates(self):
        cfg = simlab.two_stage_config(n=300, missing_rate_third_replicate=1.0)
        cohort = simlab.simulate_cohort(cfg, seed=4)
        for block in (cohort.stage1, cohort.stage2):
            assert np.isnan(block.w[:, 0, 2]).all()
            assert not np.isnan(block.w[:, 0, :2]).any()

    def test_third_replicate_presence_rate(self):
        n = 20_000
        cfg = simlab.two_stage_config(n=n, missing_rate_third_replicate=0.8)
        cohort = simlab.simulate_cohort(cfg, seed=5)
        bound = 3.0 * np.sqrt(0.2 * 0.8 / n)
        for block in (cohort.stage1, cohort.stage2):
            present = ~np.isnan(block.w[:, 0, 2])
            assert abs(present.mean() - 0.2) < bound

    def test_nonlinear_variants_shift_outcome(self):
        base = simlab.simulate_cohort(simlab.two_stage_config(n=500), seed=6)
        cubic = simlab.simulate_cohort(
            simlab.two_stage_config(n=500, treatment_free="cubic"), seed=6
        )
        assert not np.allclose(base.y, cubic.y)
        # identical covariate draws under the same seed
        assert np.array_equal(base.stage1.x, cubic.stage1.x)


class TestMeanOutcomeAndValue:
    def test_optimal_value_matches_closed_form(self):
        n = 200_000
        cohort = simlab.simulate_cohort(simlab.two_stage_config(n=n), seed=7)
        a1 = simlab.true_optimal_actions(cohort, 1)
        a2 = simlab.true_optimal_actions(cohort, 2)
        value = simlab.mean_outcome(cohort, a1, a2).mean()
        assert abs(value - closed_form_optimal_value()) < 0.02
        assert closed_form_optimal_value() == pytest.approx(3.3956, abs=5e-4)

    def test_any_policy_dominated_by_optimum(self):
        cohort = simlab.simulate_cohort(simlab.two_stage_config(n=5000), seed=8)
        opt = simlab.mean_outcome(
            cohort,
            simlab.true_optimal_actions(cohort, 1),
            simlab.true_optimal_actions(cohort, 2),
        ).mean()
        rng = np.random.default_rng(9)
        for _ in range(5):
            a1 = rng.integers(0, 2, cohort.n)
            a2 = rng.integers(0, 2, cohort.n)
            assert simlab.mean_outcome(cohort, a1, a2).mean() <= opt + 1e-12

    def test_always_wrong_policy_is_strictly_worse(self):
        cohort = simlab.simulate_cohort(simlab.two_stage_config(n=5000), seed=10)
        a1 = 1 - simlab.true_optimal_actions(cohort, 1)
        a2 = 1 - simlab.true_optimal_actions(cohort, 2)
        opt = simlab.mean_outcome(
            cohort,
            simlab.true_optimal_actions(cohort, 1),
            simlab.true_optimal_actions(cohort, 2),
        ).mean()
        assert simlab.mean_outcome(cohort, a1, a2).mean() < opt - 0.1

    def test_value_requires_truth(self):
        cohort = simlab.simulate_cohort(simlab.two_stage_config(n=100), seed=11)
        cohort.dgp = None
        with pytest.raises(MissingSource):
            simlab.mean_outcome(cohort, np.zeros(100), np.zeros(100))


class TestEstimationExperiment:
    def test_deterministic_and_parallelism_invariant(self):
        cfg = simlab.one_stage_config(n=120, sigma=0.7)
        kw = dict(estimators=("single", "calibrated"), reps=6, b=8, seed=99)
        r1 = simlab.run_estimation_experiment(cfg, **kw, parallelism=1)
        r2 = simlab.run_estimation_experiment(cfg, **kw, parallelism=1)
        r3 = simlab.run_estimation_experiment(cfg, **kw, parallelism=2)
        for a, b_, c in zip(r1.estimate_rows, r2.estimate_rows, r3.estimate_rows):
            assert a == b_ == c

    def test_rmse_identity(self):
        cfg = simlab.one_stage_config(n=150, sigma=0.5)
        report = simlab.run_estimation_experiment(cfg, reps=8, b=0, seed=5)
        for row in report.estimate_rows:
            assert row["rmse"] ** 2 == pytest.approx(row["bias"] ** 2 + row["se"] ** 2, abs=1e-6)
            assert np.isnan(row["cr"])  # no bootstrap requested

    def test_true_estimator_unbiased_within_mc_error(self):
        cfg = simlab.one_stage_config(n=400, sigma=0.9)
        report = simlab.run_estimation_experiment(cfg, estimators=("true",), reps=40, b=0, seed=17)
        for row in report.estimate_rows:
            assert abs(row["bias"]) < 3.0 * row["se"] / np.sqrt(row["reps_used"])

    def test_metadata_records_failures_and_backend(self):
        cfg = simlab.one_stage_config(n=100, sigma=0.5)
        report = simlab.run_estimation_experiment(cfg, reps=3, b=0, seed=2)
        assert report.metadata["failures"] == []
        assert report.metadata["kernel_backend"] in ("compiled", "python")


class TestPolicyEvaluation:
    def test_true_policy_on_truth_is_perfect(self):
        cfg = simlab.two_stage_config(n=2000)
        cohort = simlab.simulate_cohort(cfg, seed=12)
        policy = simlab.true_policy(cfg)
        for stage in (1, 2):
            actions = policy_actions(policy, cohort, SourceKind.TRUE, stage)
            assert np.array_equal(actions, simlab.true_optimal_actions(cohort, stage))

    def test_prediction_accuracy_rows(self):
        cfg = simlab.two_stage_config(n=600)
        train = simlab.simulate_cohort(cfg, seed=13)
        test = simlab.simulate_cohort(simlab.two_stage_config(n=800), seed=14)
        rows = simlab.evaluate_prediction_accuracy(train, test)
        assert len(rows) == 6
        for row in rows:
            assert 0.0 <= row["joint_accuracy"] <= row["stage1_accuracy"] <= 1.0
            assert row["joint_accuracy"] <= row["stage2_accuracy"]

    def test_evaluate_value_scenarios_ordered(self):
        cfg = simlab.two_stage_config(n=1500, sigma1=0.9, sigma2=0.9)
        train = simlab.simulate_cohort(cfg, seed=15)
        test = simlab.simulate_cohort(simlab.two_stage_config(n=4000, sigma1=0.9, sigma2=0.9), seed=16)
        fit = fit_qlearning(train, simlab.two_stage_design(), SourceKind.CALIBRATED)
        value_true_cov = simlab.evaluate_value(fit.policy, test, SourceKind.TRUE)
        opt = simlab.mean_outcome(
            test,
            simlab.true_optimal_actions(test, 1),
            simlab.true_optimal_actions(test, 2),
        ).mean()
        assert value_true_cov <= opt + 1e-9
        assert value_true_cov > opt - 0.1

    def test_policy_experiment_report_shape(self):
        cfg = simlab.two_stage_config(n=300)
        report = simlab.run_policy_experiment(cfg, reps=3, train_n=300, test_n=400, seed=20)
        assert len(report.accuracy_rows) == 6
        assert len(report.value_rows) == 7
        scenarios = {row["scenario"] for row in report.value_rows}
        assert "optimal" in scenarios
        opt = next(r["value"] for r in report.value_rows if r["scenario"] == "optimal")
        for row in report.value_rows:
            assert row["value"] <= opt + 0.05
