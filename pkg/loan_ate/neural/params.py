"""
Parameter containers for the two architectures.

Params are plain dicts of float64 arrays. Names starting with "b" are biases;
every other array (dense weights, LSTM gate weights, attention vector) is a
weight and is L2-penalized.

MLP:   A1 (n1 x d), A2 (n2 x n1) + tail over rep_dim = n2
LSTM:  Wl1 (4H x (d+H)), Wl2 (4H x 2H), gate order (i, f, o, g),
       v (H) for the attention variant + tail over rep_dim = H
Tail:  As (nT x T), A3 (n3 x (rep_dim + nT)) and the head:
       propensity A4 (2 x n3); outcome A4 (n4 x n3), A5 (n5 x n4), A6 (1 x n5)
"""

from typing import Literal, Optional

import numpy as np

from ..config import NetworkShape
from .layers import Params, glorot_uniform

Architecture = Literal["mlp", "lstm"]
Head = Literal["propensity", "outcome"]


def is_bias(name: str) -> bool:
    return name.startswith("b")


def head_of(params: Params) -> Head:
    return "outcome" if "A6" in params else "propensity"


def has_attention(params: Params) -> bool:
    return "v" in params


def _dense(params: Params, rng: np.random.Generator, name: str, fan_out: int, fan_in: int):
    params["A" + name] = glorot_uniform(rng, fan_out, fan_in)
    params["b" + name] = np.zeros(fan_out)


def init_tail(rng: np.random.Generator, rep_dim: int, t: int, shape: NetworkShape, head: Head) -> Params:
    params: Params = {}
    _dense(params, rng, "s", shape.n_t, t)
    _dense(params, rng, "3", shape.n3, rep_dim + shape.n_t)
    if head == "propensity":
        _dense(params, rng, "4", 2, shape.n3)
    else:
        _dense(params, rng, "4", shape.n4, shape.n3)
        _dense(params, rng, "5", shape.n5, shape.n4)
        _dense(params, rng, "6", 1, shape.n5)
    return params


def init_mlp(d: int, t: int, shape: NetworkShape, head: Head, rng: np.random.Generator) -> Params:
    params: Params = {}
    _dense(params, rng, "1", shape.n1, d)
    _dense(params, rng, "2", shape.n2, shape.n1)
    params.update(init_tail(rng, shape.n2, t, shape, head))
    return params


def init_lstm(d: int, t: int, shape: NetworkShape, head: Head, rng: np.random.Generator) -> Params:
    h = shape.lstm_hidden
    params: Params = {
        "Wl1": glorot_uniform(rng, 4 * h, d + h),
        "bl1": np.zeros(4 * h),
        "Wl2": glorot_uniform(rng, 4 * h, 2 * h),
        "bl2": np.zeros(4 * h),
    }
    if head == "outcome":
        params["v"] = glorot_uniform(rng, 1, h)[0]
    params.update(init_tail(rng, h, t, shape, head))
    return params


def init_params(
    arch: Architecture,
    d: int,
    t: int,
    shape: NetworkShape,
    head: Head,
    rng: Optional[np.random.Generator] = None,
) -> Params:
    rng = rng if rng is not None else np.random.default_rng(0)
    if arch == "mlp":
        return init_mlp(d, t, shape, head, rng)
    return init_lstm(d, t, shape, head, rng)


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def l2_penalty(params: Params) -> float:
    return float(sum(np.sum(v * v) for k, v in params.items() if not is_bias(k)))
