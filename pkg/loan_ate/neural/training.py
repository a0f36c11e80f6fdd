"""
Losses, exact gradients, mini-batch training with early stopping, and the
persisted FittedModel.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from ..config import NetworkShape, TrainConfig
from ..errors import InvalidTarget, IoFailure, NeuralError, NonFiniteLoss
from .layers import Adam, Params, softmax
from .lstm import lstm_backward_batch, lstm_forward_batch, pad_sequences
from .mlp import head_output, mlp_backward_batch, mlp_forward_batch
from .params import Architecture, Head, copy_params, init_params, is_bias, l2_penalty

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

LossKind = Literal["cross_entropy", "squared_error"]


# =============================================================================
# Types
# =============================================================================

@dataclass(frozen=True)
class ModelSpec:
    arch: Architecture
    head: Head
    d: int
    t: int
    shape: NetworkShape = field(default_factory=NetworkShape)

    @property
    def loss_kind(self) -> LossKind:
        return "cross_entropy" if self.head == "propensity" else "squared_error"


@dataclass
class Batch:
    """
    One mini-batch. `x` is (B x d) for the MLP and (B x L x d) for the LSTM,
    in which case `mask` marks the real steps.
    """
    x: np.ndarray
    s: np.ndarray
    target: np.ndarray
    mask: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass
class NetworkData:
    """
    All rows of one split. `features` is an (n x d) matrix of loan vectors
    or, for the LSTM, a list of (k_i x d) sequences.
    """
    features: np.ndarray | List[np.ndarray]
    covariates: np.ndarray
    target: np.ndarray
    dim: int

    def __post_init__(self):
        assert len(self.features) == len(self.covariates) == len(self.target), "row counts must agree"

    def __len__(self) -> int:
        return len(self.target)

    def take(self, rows: np.ndarray) -> Batch:
        s = self.covariates[rows]
        target = self.target[rows]
        if isinstance(self.features, np.ndarray):
            return Batch(x=self.features[rows], s=s, target=target)
        x, mask = pad_sequences([self.features[i] for i in rows], self.dim)
        return Batch(x=x, s=s, target=target, mask=mask)

    def all(self) -> Batch:
        return self.take(np.arange(len(self)))


@dataclass
class TrainingLog:
    rows: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch: int, train_loss: float, val_loss: float, metric: float):
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "metric": metric})

    @property
    def epochs_run(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["epoch", "train_loss", "val_loss", "metric"])


# =============================================================================
# Forward / loss / backward
# =============================================================================

def forward(
    spec: ModelSpec,
    params: Params,
    batch: Batch,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
):
    if spec.arch == "mlp":
        return mlp_forward_batch(params, batch.x, batch.s, train, rng, dropout_rate)
    mask = batch.mask if batch.mask is not None else np.ones(batch.x.shape[:2])
    return lstm_forward_batch(params, batch.x, mask, batch.s, train, rng, dropout_rate)


def _check_target(target: np.ndarray, kind: LossKind) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(target)):
        raise InvalidTarget("targets must be finite")
    if kind == "cross_entropy" and not np.all(np.isin(target, (0.0, 1.0))):
        raise InvalidTarget("cross-entropy targets must be 0 or 1")
    return target


def loss(
    output: np.ndarray,
    target: np.ndarray | float,
    kind: LossKind,
    params: Optional[Params] = None,
    l2_strength: float = 0.0,
) -> float:
    """
    Batch-mean loss plus l2_strength * sum of squared weights (biases excluded).

    `output` holds probabilities (n x 2, or a single 2-vector) for
    cross-entropy and predictions for squared error.

    Example:
        >>> loss(np.array([0.5, 0.5]), 1, "cross_entropy")
        0.6931471805599453
    """
    if kind not in ("cross_entropy", "squared_error"):
        raise InvalidTarget(f"unknown loss kind: {kind}")
    y = _check_target(np.atleast_1d(target), kind)
    out = np.asarray(output, dtype=np.float64)
    if kind == "cross_entropy":
        probs = out.reshape(-1, 2)
        picked = probs[np.arange(len(y)), y.astype(int)]
        base = float(-np.mean(np.log(np.clip(picked, 1e-300, 1.0))))
    else:
        base = float(np.mean((out.reshape(-1) - y) ** 2))
    penalty = l2_strength * l2_penalty(params) if params is not None and l2_strength else 0.0
    return base + penalty


def _data_loss_and_grad(spec: ModelSpec, z_out: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    y = _check_target(target, spec.loss_kind)
    n = len(y)
    if spec.loss_kind == "cross_entropy":
        log_p = log_softmax(z_out, axis=1)
        labels = y.astype(int)
        value = float(-np.mean(log_p[np.arange(n), labels]))
        dz = softmax(z_out)
        dz[np.arange(n), labels] -= 1.0
        return value, dz / n
    pred = np.maximum(z_out[:, 0], 0.0)
    resid = pred - y
    value = float(np.mean(resid ** 2))
    dz = (2.0 * resid / n * (z_out[:, 0] > 0))[:, None]
    return value, dz


def backward(
    spec: ModelSpec,
    params: Params,
    batch: Batch,
    l2_strength: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_rate: float = 0.0,
) -> Tuple[float, Params]:
    """
    Regularized batch-mean loss and its exact gradient for every parameter.

    Returns:
        (loss value, gradients keyed like params)
    """
    z_out, cache = forward(spec, params, batch, train, rng, dropout_rate)
    value, dz = _data_loss_and_grad(spec, z_out, batch.target)
    if spec.arch == "mlp":
        grads = mlp_backward_batch(params, cache, dz)
    else:
        grads = lstm_backward_batch(params, cache, dz)
    if l2_strength:
        value += l2_strength * l2_penalty(params)
        for name, arr in params.items():
            if not is_bias(name):
                grads[name] = grads[name] + 2.0 * l2_strength * arr
    return value, grads


def data_loss(spec: ModelSpec, params: Params, batch: Batch) -> float:
    """Unregularized eval-mode loss."""
    z_out, _ = forward(spec, params, batch)
    return _data_loss_and_grad(spec, z_out, batch.target)[0]


# =============================================================================
# Gradient check
# =============================================================================

@dataclass
class GradientCheckResult:
    max_rel_error: float
    per_param: Dict[str, float]


def gradient_check(
    spec: ModelSpec,
    params: Params,
    batch: Batch,
    l2_strength: float = 0.0,
    eps: float = 1e-5,
    dropout_rate: float = 0.0,
    dropout_seed: Optional[int] = None,
    floor: float = 1e-6,
) -> GradientCheckResult:
    """
    Compares analytic gradients with central finite differences.

    With a dropout_seed, every evaluation draws the same dropout masks.
    Relative error per entry is |a - n| / max(|a| + |n|, floor).
    """
    train = dropout_seed is not None and dropout_rate > 0

    def _eval() -> Tuple[float, Params]:
        rng = np.random.default_rng(dropout_seed) if train else None
        return backward(spec, params, batch, l2_strength, train, rng, dropout_rate)

    _, analytic = _eval()
    per_param: Dict[str, float] = {}
    for name, arr in params.items():
        worst = 0.0
        grad = analytic[name].reshape(-1)
        for k in range(arr.size):
            original = arr.flat[k]
            arr.flat[k] = original + eps
            plus, _ = _eval()
            arr.flat[k] = original - eps
            minus, _ = _eval()
            arr.flat[k] = original
            numeric = (plus - minus) / (2.0 * eps)
            rel = abs(grad[k] - numeric) / max(abs(grad[k]) + abs(numeric), floor)
            worst = max(worst, rel)
        per_param[name] = worst
    return GradientCheckResult(max_rel_error=max(per_param.values()), per_param=per_param)


# =============================================================================
# Fitted model
# =============================================================================

@dataclass
class FittedModel:
    spec: ModelSpec
    params: Params
    log: TrainingLog = field(default_factory=TrainingLog)

    def predict_raw(self, data: NetworkData, batch_size: int = 512) -> np.ndarray:
        """Head outputs row by row: (n x 2) probabilities or (n x 1) predictions."""
        chunks = []
        for start in range(0, len(data), batch_size):
            batch = data.take(np.arange(start, min(start + batch_size, len(data))))
            z_out, _ = forward(self.spec, self.params, batch)
            chunks.append(head_output(self.params, z_out))
        width = 2 if self.spec.head == "propensity" else 1
        return np.vstack(chunks) if chunks else np.zeros((0, width))

    def predict(self, data: NetworkData, batch_size: int = 512) -> np.ndarray:
        """P(W=1) for propensity models, the predicted outcome otherwise."""
        raw = self.predict_raw(data, batch_size)
        return raw[:, 1] if self.spec.head == "propensity" else raw[:, 0]

    def save(self, path: Path, extra_meta: Optional[Dict[str, Any]] = None) -> Path:
        meta = {
            "format_version": FORMAT_VERSION,
            "arch": self.spec.arch,
            "head": self.spec.head,
            "d": self.spec.d,
            "t": self.spec.t,
            "shape": self.spec.shape.model_dump(),
            "best_epoch": self.log.best_epoch,
            **(extra_meta or {}),
        }
        arrays = {name: arr for name, arr in self.params.items()}
        with open(path, "wb") as fp:
            np.savez(fp, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        return Path(path)

    @classmethod
    def load(cls, path: Path) -> "FittedModel":
        try:
            with np.load(path, allow_pickle=False) as archive:
                meta = json.loads(str(archive["__meta__"]))
                params = {k: archive[k].astype(np.float64) for k in archive.files if k != "__meta__"}
        except (OSError, KeyError, ValueError) as e:
            raise IoFailure(f"cannot read model file {path}: {e}", path=str(path)) from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise NeuralError(f"unsupported model format version: {meta.get('format_version')}")
        spec = ModelSpec(
            arch=meta["arch"], head=meta["head"], d=meta["d"], t=meta["t"],
            shape=NetworkShape(**meta["shape"]),
        )
        return cls(spec=spec, params=params, log=TrainingLog(best_epoch=meta.get("best_epoch", 0)))


# =============================================================================
# Training
# =============================================================================

def _metric(spec: ModelSpec, model_params: Params, data: NetworkData) -> float:
    """Accuracy at 0.5 for propensity heads, RMSE for outcome heads."""
    fitted = FittedModel(spec=spec, params=model_params)
    pred = fitted.predict(data)
    if spec.head == "propensity":
        return float(np.mean((pred >= 0.5) == (data.target == 1)))
    return float(np.sqrt(np.mean((pred - data.target) ** 2)))


class Trainer:
    """
    Mini-batch Adam with early stopping on validation loss.

    Training stops once `patience` epochs have passed without a new best
    validation loss; the parameters of the best epoch are returned.
    Without validation rows the training loss drives early stopping.
    """

    def __init__(self, spec: ModelSpec, config: TrainConfig, verbose: bool = False):
        self.spec = spec
        self.config = config
        self.verbose = verbose

    def _log(self, msg: str):
        if self.verbose:
            logger.debug(msg)

    def fit(self, train_data: NetworkData, val_data: Optional[NetworkData] = None) -> FittedModel:
        if len(train_data) == 0:
            raise NeuralError("no training rows")
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        params = init_params(self.spec.arch, self.spec.d, self.spec.t, self.spec.shape, self.spec.head, rng)
        if self.spec.head == "outcome":
            # start the ReLU head in its active region
            params["b6"][:] = float(np.mean(train_data.target))
        optimizer = Adam(params, cfg.learning_rate)
        has_val = val_data is not None and len(val_data) > 0

        log = TrainingLog()
        best_params = copy_params(params)
        best_loss = np.inf
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(train_data))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                rows = order[start:start + cfg.batch_size]
                batch = train_data.take(rows)
                value, grads = backward(
                    self.spec, params, batch, cfg.l2_strength,
                    train=True, rng=rng, dropout_rate=cfg.dropout_rate,
                )
                if not np.isfinite(value):
                    raise NonFiniteLoss(epoch, float(value), float("nan"))
                optimizer.step(params, grads)
                total += value * len(rows)
            train_loss = total / len(order)

            monitor = val_data if has_val else train_data
            val_loss = data_loss(self.spec, params, monitor.all())
            if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
                raise NonFiniteLoss(epoch, float(train_loss), float(val_loss))
            metric = _metric(self.spec, params, monitor)
            log.append(epoch, float(train_loss), float(val_loss), metric)
            self._log(f"epoch {epoch}: train={train_loss:.6f} val={val_loss:.6f} metric={metric:.4f}")

            if val_loss < best_loss:
                best_loss = val_loss
                best_params = copy_params(params)
                log.best_epoch = epoch
            elif epoch - log.best_epoch > cfg.patience:
                log.stopped_early = True
                break

        logger.info("Trained %s/%s: %d epochs, best epoch %d, best loss %.6f",
                    self.spec.arch, self.spec.head, log.epochs_run, log.best_epoch, best_loss)
        return FittedModel(spec=self.spec, params=best_params, log=log)


def train(
    spec: ModelSpec,
    train_data: NetworkData,
    val_data: Optional[NetworkData],
    config: TrainConfig,
    verbose: bool = False,
) -> Tuple[FittedModel, TrainingLog]:
    fitted = Trainer(spec, config, verbose=verbose).fit(train_data, val_data)
    return fitted, fitted.log


def network_data(
    features: np.ndarray | Sequence[np.ndarray],
    covariates: np.ndarray,
    target: np.ndarray,
    dim: int,
) -> NetworkData:
    feats = features if isinstance(features, np.ndarray) else list(features)
    return NetworkData(
        features=feats,
        covariates=np.asarray(covariates, dtype=np.float64),
        target=np.asarray(target, dtype=np.float64),
        dim=dim,
    )
