import numpy as np
import pandas as pd
import pytest

from loan_ate.config import NetworkShape, NuisanceSettings, TrainConfig
from loan_ate.errors import MissingTextFeatures
from loan_ate.nuisance import (
    PREDICTION_COLUMNS,
    NuisanceInputs,
    NuisancePredictions,
    evaluate,
    fit_nuisances,
    linear_design,
)

SMALL = NetworkShape(n1=6, n2=6, n_t=2, n3=6, n4=4, n5=3, lstm_hidden=3)
QUICK = TrainConfig(max_epochs=2, batch_size=8, dropout_rate=0.0)


def _splits(n: int) -> np.ndarray:
    return np.array(["train", "train", "train", "validation", "test"] * (n // 5))


def _inputs(n: int = 100, p: int = 3, seed: int = 0, text_dim: int = 0) -> NuisanceInputs:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    w = np.array([0, 1] * (n // 2))
    rng.shuffle(w)
    y = 1.0 + x @ np.arange(1, p + 1) + 2.0 * w
    vectors = sequences = None
    if text_dim:
        vectors = rng.standard_normal((n, text_dim))
        sequences = [rng.standard_normal((k, text_dim)) for k in rng.integers(0, 5, n)]
    return NuisanceInputs(
        x=x, y=y, w=w.astype(float), split=_splits(n), unit_ids=np.arange(n),
        loan_vectors=vectors, sequences=sequences,
    )


# =============================================================================
# Linear nuisances
# =============================================================================

class TestLinearNuisances:

    def test_exact_linear_outcomes(self):
        inputs = _inputs()
        settings = NuisanceSettings(outcome_lambda=0.0, propensity_lambda=0.05, tol=1e-12, max_iter=100_000)

        predictions = fit_nuisances("linear", inputs, settings=settings)
        metrics = evaluate(predictions, inputs.split)

        assert metrics.rmse_treated < 1e-6
        assert metrics.rmse_control < 1e-6
        np.testing.assert_allclose(predictions.mu1 - predictions.mu0, 2.0, atol=1e-6)

    def test_propensities_are_open_interval(self):
        predictions = fit_nuisances("linear", _inputs(), settings=NuisanceSettings(propensity_lambda=0.01))
        assert np.all((predictions.e > 0) & (predictions.e < 1))

    def test_random_assignment_gives_flat_propensity(self):
        rng = np.random.default_rng(3)
        n = 2000
        inputs = NuisanceInputs(
            x=rng.standard_normal((n, 3)),
            y=rng.standard_normal(n),
            w=(rng.random(n) < 0.5).astype(float),
            split=_splits(n),
            unit_ids=np.arange(n),
        )

        predictions = fit_nuisances("linear", inputs, settings=NuisanceSettings(propensity_lambda=0.01))

        assert 0.45 < predictions.e.mean() < 0.55

    def test_every_unit_gets_predictions(self):
        inputs = _inputs(n=50)
        predictions = fit_nuisances("linear", inputs, settings=NuisanceSettings(outcome_lambda=0.1, propensity_lambda=0.1))
        assert len(predictions) == 50
        assert predictions.tags == {"kind": "linear", "features": "without_text"}
        assert set(predictions.models) == {"mu1", "mu0", "e"}

    def test_with_text_appends_loan_vectors(self):
        inputs = _inputs(n=50, text_dim=4)
        assert linear_design(inputs, "with_text").shape == (50, 7)
        assert linear_design(inputs, "without_text").shape == (50, 3)


class TestMissingText:

    def test_with_text_without_vectors(self):
        with pytest.raises(MissingTextFeatures):
            fit_nuisances("linear", _inputs(), features="with_text")

    @pytest.mark.parametrize("kind", ["mlp", "lstm"])
    def test_networks_need_with_text(self, kind):
        with pytest.raises(MissingTextFeatures):
            fit_nuisances(kind, _inputs(text_dim=4), features="without_text")

    def test_mlp_without_vectors(self):
        inputs = _inputs(text_dim=4)
        inputs.loan_vectors = None
        with pytest.raises(MissingTextFeatures):
            fit_nuisances("mlp", inputs, features="with_text")

    def test_lstm_without_sequences(self):
        inputs = _inputs(text_dim=4)
        inputs.sequences = None
        with pytest.raises(MissingTextFeatures):
            fit_nuisances("lstm", inputs, features="with_text")


# =============================================================================
# Network nuisances
# =============================================================================

class TestNetworkNuisances:

    def test_mlp_on_default_embedding_size(self):
        rng = np.random.default_rng(1)
        n = 40
        inputs = NuisanceInputs(
            x=rng.integers(0, 2, (n, 17)).astype(float),
            y=rng.uniform(0.5, 10.0, n),
            w=np.array([0.0, 1.0] * (n // 2)),
            split=_splits(n),
            unit_ids=np.arange(n),
            loan_vectors=rng.standard_normal((n, 100)),
        )

        predictions = fit_nuisances("mlp", inputs, features="with_text", training=QUICK, network=SMALL)

        assert predictions.mu1.shape == (n,)
        assert np.all(predictions.mu1 >= 0) and np.all(predictions.mu0 >= 0)
        assert np.all((predictions.e > 0) & (predictions.e < 1))

    def test_lstm_quick_fit(self):
        inputs = _inputs(n=40, text_dim=3)
        inputs.y = np.abs(inputs.y)

        predictions = fit_nuisances("lstm", inputs, features="with_text", training=QUICK, network=SMALL)

        assert len(predictions) == 40
        assert np.all(np.isfinite(predictions.mu1))
        assert np.all((predictions.e > 0) & (predictions.e < 1))

    def test_network_fits_are_deterministic(self):
        inputs = _inputs(n=30, text_dim=3)
        inputs.y = np.abs(inputs.y)

        a = fit_nuisances("mlp", inputs, features="with_text", training=QUICK, network=SMALL)
        b = fit_nuisances("mlp", inputs, features="with_text", training=QUICK, network=SMALL)

        np.testing.assert_array_equal(a.e, b.e)
        np.testing.assert_array_equal(a.mu1, b.mu1)


# =============================================================================
# Prediction tables
# =============================================================================

class TestPredictionFrame:

    def test_frame_round_trip(self):
        predictions = NuisancePredictions(
            unit_id=np.array([11, 12]), w=np.array([1, 0]), y=np.array([3.0, 1.0]),
            mu1=np.array([3.0, 3.0]), mu0=np.array([1.0, 1.0]), e=np.array([0.5, 0.5]),
        )

        frame = predictions.to_frame()
        restored = NuisancePredictions.from_frame(frame)

        assert frame.columns.tolist() == PREDICTION_COLUMNS
        np.testing.assert_array_equal(restored.e, predictions.e)
        np.testing.assert_array_equal(restored.unit_id, predictions.unit_id)

    def test_missing_columns(self):
        from loan_ate.errors import NuisanceError

        with pytest.raises(NuisanceError, match="mu0"):
            NuisancePredictions.from_frame(pd.DataFrame({"unit_id": [1], "w": [1], "y": [1.0], "mu1": [1.0], "e": [0.5]}))
