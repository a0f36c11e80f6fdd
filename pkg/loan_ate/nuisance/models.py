"""
Outcome and propensity nuisance fits behind one interface.

    mu1(.)  fitted on treated units of the training data
    mu0(.)  fitted on control units of the training data
    e(.)    fitted on all training units

and every unit in the data gets all three predictions. Linear models fit on
train + validation (lambda comes from cross-validation); networks train on
the train split and early-stop on the validation split.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional

import numpy as np
import pandas as pd

from ..config import FeatureMode, NetworkShape, NuisanceKind, NuisanceSettings, TrainConfig
from ..errors import MissingTextFeatures, NuisanceError
from ..ingest import Dataset
from ..neural import FittedModel, ModelSpec, NetworkData, Trainer
from .linear import LinearFit, fit_with_selection

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["unit_id", "w", "y", "mu1", "mu0", "e"]


# =============================================================================
# Types
# =============================================================================

@dataclass
class NuisanceInputs:
    """
    Everything a nuisance fit can read. `x` holds the 17 covariates (or the
    p synthetic ones); text features are optional.
    """
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    split: np.ndarray
    unit_ids: np.ndarray
    loan_vectors: Optional[np.ndarray] = None
    sequences: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        n = self.x.shape[0]
        assert len(self.y) == len(self.w) == len(self.split) == len(self.unit_ids) == n, "row counts must agree"
        assert self.loan_vectors is None or self.loan_vectors.shape[0] == n, "one loan vector per unit"
        assert self.sequences is None or len(self.sequences) == n, "one sequence per unit"

    @classmethod
    def from_dataset(
        cls,
        dataset: Dataset,
        loan_vectors: Optional[np.ndarray] = None,
        sequences: Optional[List[np.ndarray]] = None,
    ) -> "NuisanceInputs":
        return cls(
            x=np.asarray(dataset.x_matrix),
            y=dataset.y,
            w=dataset.w,
            split=np.array(dataset.split),
            unit_ids=dataset.unit_ids,
            loan_vectors=loan_vectors,
            sequences=sequences,
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    def mask(self, *splits: str) -> np.ndarray:
        return np.isin(self.split, splits)


@dataclass
class NuisancePredictions:
    unit_id: np.ndarray
    w: np.ndarray
    y: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    e: np.ndarray
    tags: Dict[str, str] = field(default_factory=dict)
    models: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.unit_id)
        assert all(len(a) == n for a in (self.w, self.y, self.mu1, self.mu0, self.e)), "all vectors must have length n"

    def __len__(self) -> int:
        return len(self.unit_id)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "unit_id": self.unit_id,
            "w": self.w.astype(int),
            "y": self.y,
            "mu1": self.mu1,
            "mu0": self.mu0,
            "e": self.e,
        }, columns=PREDICTION_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, tags: Optional[Dict[str, str]] = None) -> "NuisancePredictions":
        missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
        if missing:
            raise NuisanceError(f"predictions file is missing columns: {', '.join(missing)}")
        return cls(
            unit_id=frame["unit_id"].to_numpy(),
            w=frame["w"].to_numpy(dtype=np.int64),
            y=frame["y"].to_numpy(dtype=np.float64),
            mu1=frame["mu1"].to_numpy(dtype=np.float64),
            mu0=frame["mu0"].to_numpy(dtype=np.float64),
            e=frame["e"].to_numpy(dtype=np.float64),
            tags=dict(tags or {}),
        )


# =============================================================================
# Design matrices
# =============================================================================

def linear_design(inputs: NuisanceInputs, features: FeatureMode) -> np.ndarray:
    """17 covariates, with the loan vector appended in with_text mode."""
    if features == "without_text":
        return inputs.x
    if inputs.loan_vectors is None:
        raise MissingTextFeatures("with_text features need loan vectors; run the embed stage first")
    return np.hstack([inputs.x, inputs.loan_vectors])


def _network_data(inputs: NuisanceInputs, kind: NuisanceKind, rows: np.ndarray, target: np.ndarray) -> NetworkData:
    if kind == "mlp":
        dim = inputs.loan_vectors.shape[1]
        features = inputs.loan_vectors[rows]
    else:
        dim = _sequence_dim(inputs)
        features = [inputs.sequences[i] for i in rows]
    return NetworkData(features=features, covariates=inputs.x[rows], target=target, dim=dim)


def _sequence_dim(inputs: NuisanceInputs) -> int:
    for seq in inputs.sequences:
        if len(seq):
            return seq.shape[1]
    if inputs.loan_vectors is not None:
        return inputs.loan_vectors.shape[1]
    raise MissingTextFeatures("every sequence is empty and no loan vectors give the embedding dimension")


def _check_text(inputs: NuisanceInputs, kind: NuisanceKind, features: FeatureMode) -> None:
    if kind == "linear":
        return
    if features != "with_text":
        raise MissingTextFeatures(f"{kind} nuisance models read description text; use features=with_text")
    if kind == "mlp" and inputs.loan_vectors is None:
        raise MissingTextFeatures("mlp nuisance models need loan vectors; run the embed stage first")
    if kind == "lstm" and inputs.sequences is None:
        raise MissingTextFeatures("lstm nuisance models need loan sequences; run the embed stage first")


# =============================================================================
# Fitting
# =============================================================================

class NuisanceFitter:
    """Fits mu1, mu0 and e for one (kind, features) combination."""

    def __init__(
        self,
        kind: NuisanceKind,
        features: FeatureMode,
        settings: Optional[NuisanceSettings] = None,
        training: Optional[TrainConfig] = None,
        network: Optional[NetworkShape] = None,
        verbose: bool = False,
    ):
        self.kind = kind
        self.features = features
        self.settings = settings or NuisanceSettings()
        self.training = training or TrainConfig()
        self.network = network or NetworkShape()
        self.verbose = verbose

    def _log(self, msg: str):
        if self.verbose:
            logger.debug(msg)

    def fit(self, inputs: NuisanceInputs) -> NuisancePredictions:
        _check_text(inputs, self.kind, self.features)
        if self.kind == "linear":
            mu1, mu0, e, models = self._fit_linear(inputs)
        else:
            mu1, mu0, e, models = self._fit_network(inputs)

        e = self._clip(e)
        return NuisancePredictions(
            unit_id=inputs.unit_ids,
            w=inputs.w,
            y=inputs.y,
            mu1=mu1,
            mu0=mu0,
            e=e,
            tags={"kind": self.kind, "features": self.features},
            models=models,
        )

    def _clip(self, e: np.ndarray) -> np.ndarray:
        c = self.settings.clip
        n_clipped = int(np.sum((e < c) | (e > 1.0 - c)))
        if n_clipped:
            logger.warning("Clipped %d propensity predictions into [%g, %g]", n_clipped, c, 1.0 - c)
        return np.clip(e, c, 1.0 - c)

    # ------------------------------------------------------------
    # Linear
    # ------------------------------------------------------------
    def _fit_linear(self, inputs: NuisanceInputs):
        s = self.settings
        design = linear_design(inputs, self.features)
        fit_rows = inputs.mask("train", "validation")
        kwargs = dict(n_folds=s.n_folds, n_lambdas=s.n_lambdas, min_ratio=s.lambda_min_ratio,
                      tol=s.tol, max_iter=s.max_iter, seed=s.seed)

        models: Dict[str, LinearFit] = {}
        for arm, label in ((1, "mu1"), (0, "mu0")):
            rows = fit_rows & (inputs.w == arm)
            if rows.sum() < 2:
                raise NuisanceError(f"fewer than two {'treated' if arm else 'control'} training units")
            models[label] = fit_with_selection(
                design[rows], inputs.y[rows], s.outcome_alpha, "identity", s.outcome_lambda, **kwargs,
            )
            self._log(f"{label}: lambda={models[label].lam:g}, {len(models[label].support)} non-zero")
        models["e"] = fit_with_selection(
            design[fit_rows], inputs.w[fit_rows], s.propensity_alpha, "logistic", s.propensity_lambda, **kwargs,
        )
        self._log(f"e: lambda={models['e'].lam:g}, {len(models['e'].support)} non-zero")

        # clipping happens once, in fit()
        e = models["e"].predict(design, clip=0.0)
        return models["mu1"].predict(design), models["mu0"].predict(design), e, models

    # ------------------------------------------------------------
    # Networks
    # ------------------------------------------------------------
    def _train(self, inputs: NuisanceInputs, head: str, target: np.ndarray, rows: np.ndarray, seed_offset: int) -> FittedModel:
        train_rows = np.flatnonzero(rows & inputs.mask("train"))
        val_rows = np.flatnonzero(rows & inputs.mask("validation"))
        if len(train_rows) == 0:
            raise NuisanceError(f"no training units for the {head} network")
        dim = inputs.loan_vectors.shape[1] if self.kind == "mlp" else _sequence_dim(inputs)
        spec = ModelSpec(arch=self.kind, head=head, d=dim, t=inputs.x.shape[1], shape=self.network)
        config = self.training.model_copy(update={"seed": self.training.seed + seed_offset})
        trainer = Trainer(spec, config, verbose=self.verbose)
        val = _network_data(inputs, self.kind, val_rows, target[val_rows]) if len(val_rows) else None
        return trainer.fit(_network_data(inputs, self.kind, train_rows, target[train_rows]), val)

    def _fit_network(self, inputs: NuisanceInputs):
        every = np.ones(len(inputs), dtype=bool)
        models = {
            "mu1": self._train(inputs, "outcome", inputs.y, inputs.w == 1, 0),
            "mu0": self._train(inputs, "outcome", inputs.y, inputs.w == 0, 1),
            "e": self._train(inputs, "propensity", inputs.w.astype(np.float64), every, 2),
        }
        all_rows = _network_data(inputs, self.kind, np.arange(len(inputs)), inputs.y)
        return (
            models["mu1"].predict(all_rows),
            models["mu0"].predict(all_rows),
            models["e"].predict(all_rows),
            models,
        )


def fit_nuisances(
    kind: NuisanceKind,
    inputs: NuisanceInputs | Dataset,
    features: FeatureMode = "without_text",
    settings: Optional[NuisanceSettings] = None,
    training: Optional[TrainConfig] = None,
    network: Optional[NetworkShape] = None,
    verbose: bool = False,
) -> NuisancePredictions:
    """
    Fits mu1, mu0 and e and predicts them for every unit.

    Raises:
        MissingTextFeatures: a neural kind without text, or with_text without embeddings
    """
    if isinstance(inputs, Dataset):
        inputs = NuisanceInputs.from_dataset(inputs)
    fitter = NuisanceFitter(kind, features, settings, training, network, verbose)
    predictions = fitter.fit(inputs)
    logger.info("Fitted %s nuisances (%s) on %d units", kind, features, len(predictions))
    return predictions
