"""
Feed-forward network over loan vectors, and the dense tail it shares with
the LSTM.

    h1 = ReLU(A1 x + b1)           h2 = ReLU(A2 h1 + b2)
    s_final = ReLU(As s + bs)      H2 = concat(h2, s_final)
    h3 = ReLU(A3 H2 + b3)
    propensity: softmax(A4 h3 + b4)
    outcome:    ReLU(A6 ReLU(A5 ReLU(A4 h3 + b4) + b5) + b6)

Dropout (train mode only) acts on H2 and h3.
"""

from typing import Any, Dict, Literal, Optional, Tuple

import numpy as np

from ..errors import ShapeMismatch
from .layers import Params, dropout_mask, relu, relu_grad, softmax
from .params import head_of

Mode = Literal["train", "eval"]
Cache = Dict[str, Any]


# =============================================================================
# Dense tail
# =============================================================================

def tail_forward(
    params: Params,
    rep: np.ndarray,
    s: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tuple[np.ndarray, Cache]:
    """Returns the pre-activation of the output layer and the cache for backprop."""
    use_dropout = train and dropout_rate > 0
    if use_dropout and rng is None:
        rng = np.random.default_rng()

    zs = s @ params["As"].T + params["bs"]
    big_h = np.concatenate([rep, relu(zs)], axis=1)
    mask_h = dropout_mask(rng, big_h.shape, dropout_rate) if use_dropout else None
    big_h_d = big_h * mask_h if use_dropout else big_h

    z3 = big_h_d @ params["A3"].T + params["b3"]
    h3 = relu(z3)
    mask_3 = dropout_mask(rng, h3.shape, dropout_rate) if use_dropout else None
    h3_d = h3 * mask_3 if use_dropout else h3

    cache: Cache = {
        "s": s, "zs": zs, "rep_dim": rep.shape[1],
        "mask_h": mask_h, "big_h_d": big_h_d,
        "z3": z3, "mask_3": mask_3, "h3_d": h3_d,
    }
    z4 = h3_d @ params["A4"].T + params["b4"]
    if head_of(params) == "propensity":
        return z4, cache

    h4 = relu(z4)
    z5 = h4 @ params["A5"].T + params["b5"]
    h5 = relu(z5)
    z6 = h5 @ params["A6"].T + params["b6"]
    cache.update(z4=z4, h4=h4, z5=z5, h5=h5)
    return z6, cache


def tail_backward(params: Params, cache: Cache, dz_out: np.ndarray) -> Tuple[Params, np.ndarray]:
    """Gradients of the tail parameters and of the representation fed into it."""
    grads: Params = {}
    if head_of(params) == "outcome":
        grads["A6"] = dz_out.T @ cache["h5"]
        grads["b6"] = dz_out.sum(axis=0)
        dz5 = (dz_out @ params["A6"]) * relu_grad(cache["z5"])
        grads["A5"] = dz5.T @ cache["h4"]
        grads["b5"] = dz5.sum(axis=0)
        dz4 = (dz5 @ params["A5"]) * relu_grad(cache["z4"])
    else:
        dz4 = dz_out
    grads["A4"] = dz4.T @ cache["h3_d"]
    grads["b4"] = dz4.sum(axis=0)

    dh3 = dz4 @ params["A4"]
    if cache["mask_3"] is not None:
        dh3 = dh3 * cache["mask_3"]
    dz3 = dh3 * relu_grad(cache["z3"])
    grads["A3"] = dz3.T @ cache["big_h_d"]
    grads["b3"] = dz3.sum(axis=0)

    d_big_h = dz3 @ params["A3"]
    if cache["mask_h"] is not None:
        d_big_h = d_big_h * cache["mask_h"]
    k = cache["rep_dim"]
    drep, dsf = d_big_h[:, :k], d_big_h[:, k:]
    dzs = dsf * relu_grad(cache["zs"])
    grads["As"] = dzs.T @ cache["s"]
    grads["bs"] = dzs.sum(axis=0)
    return grads, drep


def head_output(params: Params, z_out: np.ndarray) -> np.ndarray:
    """Softmax probabilities (B x 2) or ReLU predictions (B x 1)."""
    return softmax(z_out) if head_of(params) == "propensity" else relu(z_out)


def check_covariates(params: Params, s: np.ndarray) -> None:
    if s.ndim != 2 or s.shape[1] != params["As"].shape[1]:
        raise ShapeMismatch(f"covariates must have {params['As'].shape[1]} columns, got shape {s.shape}")


# =============================================================================
# MLP
# =============================================================================

def mlp_forward_batch(
    params: Params,
    x: np.ndarray,
    s: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tuple[np.ndarray, Cache]:
    if x.ndim != 2 or x.shape[1] != params["A1"].shape[1]:
        raise ShapeMismatch(f"loan vectors must have {params['A1'].shape[1]} columns, got shape {x.shape}")
    check_covariates(params, s)
    if x.shape[0] != s.shape[0]:
        raise ShapeMismatch("loan vectors and covariates differ in row count")

    z1 = x @ params["A1"].T + params["b1"]
    h1 = relu(z1)
    z2 = h1 @ params["A2"].T + params["b2"]
    h2 = relu(z2)
    z_out, cache = tail_forward(params, h2, s, train, rng, dropout_rate)
    cache.update(x=x, z1=z1, h1=h1, z2=z2)
    return z_out, cache


def mlp_backward_batch(params: Params, cache: Cache, dz_out: np.ndarray) -> Params:
    grads, dh2 = tail_backward(params, cache, dz_out)
    dz2 = dh2 * relu_grad(cache["z2"])
    grads["A2"] = dz2.T @ cache["h1"]
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params["A2"]) * relu_grad(cache["z1"])
    grads["A1"] = dz1.T @ cache["x"]
    grads["b1"] = dz1.sum(axis=0)
    return grads


def mlp_forward(
    params: Params,
    loan_vec: np.ndarray,
    covariates: np.ndarray,
    mode: Mode = "eval",
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """
    Network output for one loan (1-D inputs) or a batch (2-D inputs).

    Returns:
        (2,) propensity probabilities or (1,) outcome prediction; with batch
        inputs, one such row per loan.

    Example:
        >>> p = mlp_forward(params, loan_vec, covariates)   # propensity head
        >>> p.sum()
        1.0
    """
    x = np.asarray(loan_vec, dtype=np.float64)
    s = np.asarray(covariates, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, s = x[None, :], s[None, :]
    z_out, _ = mlp_forward_batch(params, x, s, mode == "train", rng, dropout_rate)
    out = head_output(params, z_out)
    return out[0] if single else out
