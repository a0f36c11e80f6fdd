import numpy as np
import pytest

from loan_ate.neural.layers import Adam, dropout_mask, glorot_uniform, relu, relu_grad, softmax


class TestActivations:

    def test_relu(self):
        z = np.array([-1.0, 0.0, 2.0])
        assert relu(z).tolist() == [0.0, 0.0, 2.0]
        assert relu_grad(z).tolist() == [0.0, 0.0, 1.0]

    def test_softmax_rows_sum_to_one(self):
        z = np.array([[0.0, 0.0], [1000.0, -1000.0], [3.0, 1.0]])
        p = softmax(z)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert p[0].tolist() == pytest.approx([0.5, 0.5], abs=1e-12)
        assert np.all(np.isfinite(p))


class TestInitialization:

    def test_glorot_bounds(self):
        w = glorot_uniform(np.random.default_rng(0), 30, 20)
        assert w.shape == (30, 20)
        assert np.abs(w).max() <= np.sqrt(6.0 / 50)

    def test_dropout_rescales(self):
        mask = dropout_mask(np.random.default_rng(0), (20000,), 0.2)
        assert set(np.unique(mask)) <= {0.0, 1.25}
        assert mask.mean() == pytest.approx(1.0, abs=0.03)

    def test_no_dropout(self):
        assert dropout_mask(np.random.default_rng(0), (3, 2), 0.0).tolist() == [[1.0, 1.0]] * 3


class TestAdam:

    def test_first_step_has_learning_rate_size(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([2.0, -0.5])}

        Adam(params, learning_rate=0.1).step(params, grads)

        np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)

    def test_minimizes_quadratic(self):
        params = {"w": np.array([3.0])}
        opt = Adam(params, learning_rate=0.05)
        start = float(params["w"][0] ** 2)
        for _ in range(300):
            opt.step(params, {"w": 2.0 * params["w"]})
        assert float(params["w"][0] ** 2) < 0.01 * start
