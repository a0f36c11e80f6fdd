"""
Two stacked LSTM layers over word-vector sequences, feeding the dense tail.

Cell (gate order i, f, o, g in the stacked weight matrix):

    a_t = W [x_t, h_{t-1}] + b
    i, f, o = sigmoid(a_i), sigmoid(a_f), sigmoid(a_o);  g = tanh(a_g)
    c_t = f * c_{t-1} + i * g;   h_t = o * tanh(c_t)

Batches are right-padded; at padded steps the state is carried forward
unchanged, so the final state of every row is its last real step.
The propensity variant reads that final top-layer state; the outcome
variant reads the attention-weighted average of all top-layer states,
with weights softmax(h_t . v) over the real steps.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import NeuralError, ShapeMismatch
from .layers import Params, sigmoid
from .mlp import Cache, Mode, check_covariates, head_output, tail_backward, tail_forward
from .params import has_attention


# =============================================================================
# Padding
# =============================================================================

def pad_sequences(sequences: Sequence[np.ndarray], dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-pads to the longest sequence. Empty sequences become one zero step.

    Returns:
        (B x L x dim array, B x L mask of real steps)
    """
    lengths = [max(len(seq), 1) for seq in sequences]
    max_len = max(lengths) if lengths else 1
    x = np.zeros((len(sequences), max_len, dim))
    mask = np.zeros((len(sequences), max_len))
    for row, (seq, n) in enumerate(zip(sequences, lengths)):
        if len(seq):
            x[row, :n] = seq
        mask[row, :n] = 1.0
    return x, mask


# =============================================================================
# One LSTM layer
# =============================================================================

def _layer_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, List[dict]]:
    batch, steps, _ = x.shape
    hidden = w.shape[0] // 4
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    outputs = np.empty((batch, steps, hidden))
    steps_cache = []
    for t in range(steps):
        xh = np.concatenate([x[:, t], h], axis=1)
        a = xh @ w.T + b
        i = sigmoid(a[:, :hidden])
        f = sigmoid(a[:, hidden:2 * hidden])
        o = sigmoid(a[:, 2 * hidden:3 * hidden])
        g = np.tanh(a[:, 3 * hidden:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        m = mask[:, t:t + 1]
        steps_cache.append({"xh": xh, "i": i, "f": f, "o": o, "g": g, "c_prev": c, "tanh_c": tanh_c, "m": m})
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
        outputs[:, t] = h
    return outputs, steps_cache


def _layer_backward(w: np.ndarray, steps_cache: List[dict], d_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BPTT for one layer given dLoss/dh_t for every step. Returns (dW, db, dx)."""
    batch, steps, hidden = d_out.shape
    n_in = w.shape[1] - hidden
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[0])
    dx = np.zeros((batch, steps, n_in))
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    for t in reversed(range(steps)):
        sc = steps_cache[t]
        m = sc["m"]
        dh = d_out[:, t] + dh_next
        dh_cell = m * dh
        dc_cell = m * dc_next + dh_cell * sc["o"] * (1.0 - sc["tanh_c"] ** 2)

        di = dc_cell * sc["g"]
        df = dc_cell * sc["c_prev"]
        do = dh_cell * sc["tanh_c"]
        dg = dc_cell * sc["i"]
        da = np.concatenate([
            di * sc["i"] * (1.0 - sc["i"]),
            df * sc["f"] * (1.0 - sc["f"]),
            do * sc["o"] * (1.0 - sc["o"]),
            dg * (1.0 - sc["g"] ** 2),
        ], axis=1)

        dw += da.T @ sc["xh"]
        db += da.sum(axis=0)
        dxh = da @ w
        dx[:, t] = dxh[:, :n_in]
        dh_next = dxh[:, n_in:] + (1.0 - m) * dh
        dc_next = dc_cell * sc["f"] + (1.0 - m) * dc_next
    return dw, db, dx


# =============================================================================
# Attention
# =============================================================================

def _attention(v: np.ndarray, states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scores = states @ v
    scores = np.where(mask > 0, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores) * mask
    return weights / weights.sum(axis=1, keepdims=True)


# =============================================================================
# Full network
# =============================================================================

def _check_sequences(params: Params, x: np.ndarray) -> None:
    expected = params["Wl1"].shape[1] - params["Wl1"].shape[0] // 4
    if x.ndim != 3 or x.shape[2] != expected:
        raise ShapeMismatch(f"sequence vectors must have dimension {expected}, got shape {x.shape}")


def lstm_forward_batch(
    params: Params,
    x: np.ndarray,
    mask: np.ndarray,
    s: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tuple[np.ndarray, Cache]:
    _check_sequences(params, x)
    check_covariates(params, s)
    if x.shape[0] != s.shape[0] or mask.shape != x.shape[:2]:
        raise ShapeMismatch("sequences, mask and covariates disagree in shape")

    states1, cache1 = _layer_forward(params["Wl1"], params["bl1"], x, mask)
    states2, cache2 = _layer_forward(params["Wl2"], params["bl2"], states1, mask)
    if has_attention(params):
        alpha = _attention(params["v"], states2, mask)
        rep = np.einsum("bt,bth->bh", alpha, states2)
    else:
        alpha = None
        rep = states2[:, -1]

    z_out, cache = tail_forward(params, rep, s, train, rng, dropout_rate)
    cache.update(lstm1=cache1, lstm2=cache2, states2=states2, alpha=alpha, mask=mask)
    return z_out, cache


def lstm_backward_batch(params: Params, cache: Cache, dz_out: np.ndarray) -> Params:
    grads, drep = tail_backward(params, cache, dz_out)
    states2 = cache["states2"]
    d_states2 = np.zeros_like(states2)

    if has_attention(params):
        alpha = cache["alpha"]
        d_alpha = np.einsum("bh,bth->bt", drep, states2)
        d_scores = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        d_states2 += alpha[:, :, None] * drep[:, None, :]
        d_states2 += d_scores[:, :, None] * params["v"][None, None, :]
        grads["v"] = np.einsum("bt,bth->h", d_scores, states2)
    else:
        d_states2[:, -1] = drep

    grads["Wl2"], grads["bl2"], d_states1 = _layer_backward(params["Wl2"], cache["lstm2"], d_states2)
    grads["Wl1"], grads["bl1"], _ = _layer_backward(params["Wl1"], cache["lstm1"], d_states1)
    return grads


def _as_batch(params: Params, sequence: np.ndarray) -> np.ndarray:
    seq = np.asarray(sequence, dtype=np.float64)
    dim = params["Wl1"].shape[1] - params["Wl1"].shape[0] // 4
    if seq.size == 0:
        return np.zeros((1, 1, dim))
    if seq.ndim != 2:
        raise ShapeMismatch(f"a sequence must be (steps x {dim}), got shape {seq.shape}")
    return seq[None, :, :]


def lstm_forward(
    params: Params,
    sequence: np.ndarray,
    covariates: np.ndarray,
    mode: Mode = "eval",
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """Network output for one loan; an empty sequence is read as one zero vector."""
    x = _as_batch(params, sequence)
    s = np.asarray(covariates, dtype=np.float64)[None, :]
    mask = np.ones(x.shape[:2])
    z_out, _ = lstm_forward_batch(params, x, mask, s, mode == "train", rng, dropout_rate)
    return head_output(params, z_out)[0]


def attention_weights(params: Params, sequence: np.ndarray) -> np.ndarray:
    """Attention distribution over the steps of one sequence (outcome variant only)."""
    if not has_attention(params):
        raise NeuralError("model has no attention layer")
    x = _as_batch(params, sequence)
    _check_sequences(params, x)
    mask = np.ones(x.shape[:2])
    states1, _ = _layer_forward(params["Wl1"], params["bl1"], x, mask)
    states2, _ = _layer_forward(params["Wl2"], params["bl2"], states1, mask)
    return _attention(params["v"], states2, mask)[0]
