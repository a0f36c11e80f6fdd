from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, mean_squared_error

from ..errors import EmptySplit
from .models import NuisancePredictions

THRESHOLD = 0.5


@dataclass
class EvalMetrics:
    f1: float
    accuracy: float
    rmse_treated: float
    rmse_control: float
    n: int

    def __post_init__(self):
        assert 0.0 <= self.f1 <= 1.0, "f1 must lie in [0, 1]"
        assert 0.0 <= self.accuracy <= 1.0, "accuracy must lie in [0, 1]"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def rmse(predicted: np.ndarray, target: np.ndarray) -> float:
    """Root mean squared error; NaN for empty inputs."""
    if len(target) == 0:
        return float("nan")
    return float(np.sqrt(mean_squared_error(target, predicted)))


def evaluate(predictions: NuisancePredictions, split_labels: np.ndarray, split: str = "test") -> EvalMetrics:
    """
    F1 and accuracy of e(.) thresholded at 0.5 (treated is the positive
    class), and outcome RMSE on each arm: mu1 against Y over treated units,
    mu0 against Y over controls.

    Raises:
        EmptySplit: no unit carries the split label
    """
    rows = np.asarray(split_labels) == split
    if not rows.any():
        raise EmptySplit(f"split '{split}' is empty", split=split)
    w = predictions.w[rows].astype(int)
    predicted_class = (predictions.e[rows] >= THRESHOLD).astype(int)
    treated = w == 1
    return EvalMetrics(
        f1=float(f1_score(w, predicted_class, zero_division=0)),
        accuracy=float(accuracy_score(w, predicted_class)),
        rmse_treated=rmse(predictions.mu1[rows][treated], predictions.y[rows][treated]),
        rmse_control=rmse(predictions.mu0[rows][~treated], predictions.y[rows][~treated]),
        n=int(rows.sum()),
    )
