"""
Unit tests for the synthetic benchmark.

Run with: pytest tests/test_synthbench.py -v
"""

import numpy as np
import pytest

from loan_ate.config import DgpConfig, EstimatorSpec
from loan_ate.errors import OverlapViolation
from loan_ate.estimators import dre_ate
from loan_ate.synthbench import (
    REPLICATION_COLUMNS,
    SUMMARY_COLUMNS,
    bootstrap_se,
    generate,
    oracle_nuisances,
    run_bench,
    true_ate,
)

GAMMA = [0.5, -0.3, 0.0, 0.0, 0.0]
BETA = [1.0, 0.5, 0.0, 0.0, -1.0]


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture
def dgp():
    return DgpConfig(n=500, p=5, gamma=GAMMA, beta=BETA, seed=7)


@pytest.fixture
def oracle_spec():
    return EstimatorSpec(methods=["naive", "dre", "tmle"], nuisance="oracle")


# =============================================================================
# Generation
# =============================================================================

class TestGenerate:

    def test_same_seed_same_draw(self, dgp):
        a, b = generate(dgp), generate(dgp)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.y, b.y)
        assert a.split.tolist() == b.split.tolist()

    def test_different_seed_different_draw(self, dgp):
        other = generate(dgp.model_copy(update={"seed": 8}))
        assert not np.array_equal(generate(dgp).y, other.y)

    def test_observed_outcome_is_a_potential_outcome(self, dgp):
        data = generate(dgp)
        np.testing.assert_array_equal(data.y, np.where(data.w == 1, data.y1, data.y0))
        np.testing.assert_allclose(data.y1 - data.y0, 2.0)
        assert data.sample_ate == pytest.approx(2.0)

    def test_both_arms_and_overlap(self, dgp):
        data = generate(dgp)
        assert 0 < data.w.sum() < len(data)
        assert np.all((data.e > 0.02) & (data.e < 0.98))

    def test_overlap_violation(self):
        config = DgpConfig(n=200, p=2, gamma=[10.0, 0.0], seed=1)
        with pytest.raises(OverlapViolation):
            generate(config)

    @pytest.mark.parametrize("effect,offset", [("linear", 0.0), ("quadratic", 1.0)])
    def test_heterogeneous_effects(self, effect, offset):
        config = DgpConfig(n=300, p=2, effect=effect, seed=2)
        data = generate(config)
        expected = 2.0 + (data.x[:, 0] if effect == "linear" else data.x[:, 0] ** 2)
        np.testing.assert_allclose(data.tau_i, expected)

    def test_planted_text_confounder_is_in_the_loan_vector(self):
        config = DgpConfig(n=60, p=2, text_mode="planted", doc_length=10, seed=3)

        data = generate(config)
        inputs = data.inputs()

        assert len(data.tokens) == 60
        assert all(len(t) == 10 for t in data.tokens)
        np.testing.assert_allclose(inputs.loan_vectors[:, 0], data.confounder, atol=1e-12)
        assert len(inputs.sequences) == 60


class TestTrueAte:

    def test_constant_is_analytic(self):
        result = true_ate(DgpConfig(tau=3.5))
        assert result.value == 3.5
        assert result.mc_se == 0.0

    @pytest.mark.parametrize("effect,expected", [("linear", 2.0), ("quadratic", 3.0)])
    def test_monte_carlo(self, effect, expected):
        result = true_ate(DgpConfig(effect=effect), n_draws=200_000)
        assert abs(result.value - expected) < 5 * result.mc_se


class TestOracle:

    def test_true_nuisances(self, dgp):
        data = generate(dgp)
        predictions = oracle_nuisances(data)
        np.testing.assert_array_equal(predictions.mu1, data.mu1)
        np.testing.assert_array_equal(predictions.e, data.e)

    def test_zero_outcome_and_shift(self, dgp):
        data = generate(dgp)
        predictions = oracle_nuisances(data, outcome="zero", propensity_shift=1.0)
        assert np.all(predictions.mu0 == 0.0)
        assert np.all(predictions.e > data.e)

    @pytest.mark.parametrize("outcome,shift", [("zero", 0.0), ("true", 1.0)])
    def test_one_correct_nuisance_is_enough(self, outcome, shift):
        data = generate(DgpConfig(n=20_000, p=5, gamma=[0.3, -0.2, 0.0, 0.0, 0.0], seed=9))
        predictions = oracle_nuisances(data, outcome=outcome, propensity_shift=shift)

        estimate = dre_ate(predictions)

        assert abs(estimate.tau_hat - 2.0) < 0.1

    def test_bootstrap_tracks_sandwich_se(self):
        data = generate(DgpConfig(n=2000, p=5, gamma=GAMMA, beta=BETA, seed=4))
        predictions = oracle_nuisances(data)

        boot = bootstrap_se(dre_ate, predictions, n_boot=500, seed=1)

        assert boot == pytest.approx(dre_ate(predictions).se, rel=0.15)


# =============================================================================
# Benchmark
# =============================================================================

class TestRunBench:

    def test_small_oracle_run(self, dgp, oracle_spec):
        result = run_bench(dgp, oracle_spec, replications=3)

        assert result.true_ate == 2.0
        assert result.replications.columns.tolist() == REPLICATION_COLUMNS
        assert len(result.replications) == 9
        assert result.summary.columns.tolist() == SUMMARY_COLUMNS
        assert result.aggregate("dre")["n_ok"] == 3
        assert result.replications["seed"].unique().tolist() == [7, 8, 9]

    def test_reproducible(self, dgp, oracle_spec):
        a = run_bench(dgp, oracle_spec, replications=2)
        b = run_bench(dgp, oracle_spec, replications=2)
        assert a.replications.equals(b.replications)

    def test_linear_nuisances(self, dgp):
        spec = EstimatorSpec(methods=["baseline", "dse", "dre"], lambda_selection=0.01)
        result = run_bench(dgp, spec, replications=2)
        assert result.summary["n_failed"].tolist() == [0, 0, 0]

    def test_failures_become_rows(self, dgp):
        spec = EstimatorSpec(methods=["dre"], nuisance="mlp", features="without_text")

        result = run_bench(dgp, spec, replications=2)

        assert result.replications["error"].str.startswith("MissingTextFeatures").all()
        assert result.aggregate("dre")["n_failed"] == 2

    def test_naive_shows_the_confounding(self, dgp):
        spec = EstimatorSpec(methods=["naive"], nuisance="oracle")

        row = run_bench(dgp, spec, replications=30).aggregate("naive")

        assert abs(row["bias"]) > 5 * row["bias_mc_se"]

    def test_unknown_method_in_summary(self, dgp, oracle_spec):
        with pytest.raises(KeyError):
            run_bench(dgp, oracle_spec, replications=1).aggregate("baseline")

    @pytest.mark.slow
    def test_oracle_coverage(self, oracle_spec):
        config = DgpConfig(n=5000, p=5, gamma=GAMMA, beta=BETA, seed=100)

        result = run_bench(config, oracle_spec, replications=100)

        for method in ("dre", "tmle"):
            row = result.aggregate(method)
            assert abs(row["bias"]) < 0.05
            assert 0.91 <= row["coverage"] <= 0.99

    @pytest.mark.slow
    def test_linear_nuisances_recover_the_effect(self):
        config = DgpConfig(n=5000, p=5, gamma=GAMMA, beta=BETA, nonlinearity_weight=0.0, seed=100)
        spec = EstimatorSpec(methods=["baseline", "dse", "dre", "tmle"], nuisance="linear")

        result = run_bench(config, spec, replications=100)

        for method in spec.methods:
            row = result.aggregate(method)
            assert row["n_failed"] == 0, method
            assert abs(row["bias"]) < 0.05, method
            assert 0.91 <= row["coverage"] <= 0.99, method

    @pytest.mark.slow
    def test_sandwich_se_tracks_the_spread_of_estimates(self):
        config = DgpConfig(n=2000, p=5, gamma=GAMMA, beta=BETA, nonlinearity_weight=0.0, seed=300)
        spec = EstimatorSpec(methods=["dre"], nuisance="linear", lambda_selection=0.001)

        row = run_bench(config, spec, replications=200).aggregate("dre")

        assert row["n_ok"] == 200
        assert row["mean_se"] == pytest.approx(row["sd_tau"], rel=0.15)
