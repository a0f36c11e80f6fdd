"""
Activations, initialization, dropout and the Adam optimizer.

Weight matrices are stored as (fan_out, fan_in) and applied to row batches
as `X @ A.T + b`.
"""

from typing import Dict, Tuple

import numpy as np
from scipy.special import expit, log_softmax

Params = Dict[str, np.ndarray]


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    return (z > 0).astype(np.float64)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z, axis=-1))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def dropout_mask(rng: np.random.Generator, shape: Tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted dropout: kept units are scaled by 1/(1-rate) so eval needs no rescaling."""
    if rate <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


class Adam:
    """Adam with bias-corrected first/second moments, updating params in place."""

    def __init__(self, params: Params, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
