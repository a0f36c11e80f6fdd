"""
Validated configuration schemas.

Every knob of the pipeline lives in one pydantic model so a run can be
described by a single JSON file, overridden from the command line and
fingerprinted with `config_hash`.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigInvalid

FeatureMode = Literal["with_text", "without_text"]
NuisanceKind = Literal["linear", "mlp", "lstm"]
MethodName = Literal["naive", "baseline", "dse", "dre", "tmle"]

ALL_METHODS: List[str] = ["naive", "baseline", "dse", "dre", "tmle"]


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# =============================================================================
# Neural network training
# =============================================================================

class TrainConfig(_Schema):
    """Optimizer and regularization settings for one network fit."""
    learning_rate: float = Field(default=1e-3, gt=0)
    l2_strength: float = Field(default=1e-4, ge=0)
    dropout_rate: float = Field(default=0.2, ge=0, lt=1)
    batch_size: int = Field(default=64, gt=0)
    max_epochs: int = Field(default=50, gt=0)
    patience: int = Field(default=5, ge=0)
    seed: int = 0


class NetworkShape(_Schema):
    """Hidden sizes. Input sizes (d, T) come from the data at fit time."""
    n1: int = Field(default=64, gt=0)
    n2: int = Field(default=32, gt=0)
    n_t: int = Field(default=8, gt=0)
    n3: int = Field(default=32, gt=0)
    n4: int = Field(default=16, gt=0)
    n5: int = Field(default=8, gt=0)
    lstm_hidden: int = Field(default=32, gt=0)


# =============================================================================
# Nuisance models
# =============================================================================

class NuisanceSettings(_Schema):
    outcome_alpha: float = Field(default=0.5, ge=0, le=1)
    propensity_alpha: float = Field(default=0.5, ge=0, le=1)
    # None selects lambda by cross-validation
    outcome_lambda: Optional[float] = Field(default=None, ge=0)
    propensity_lambda: Optional[float] = Field(default=None, ge=0)
    n_folds: int = Field(default=5, ge=2)
    n_lambdas: int = Field(default=50, ge=2)
    lambda_min_ratio: float = Field(default=1e-4, gt=0, lt=1)
    tol: float = Field(default=1e-7, gt=0)
    max_iter: int = Field(default=10_000, gt=0)
    clip: float = Field(default=1e-12, gt=0, lt=0.5)
    max_len: int = Field(default=200, ge=1)
    seed: int = 0


class EmbeddingConfig(_Schema):
    dim: int = Field(default=100, gt=0)
    max_len: int = Field(default=200, ge=1)


# =============================================================================
# Synthetic benchmark
# =============================================================================

class DgpConfig(_Schema):
    """Synthetic data-generating process with a known average effect."""
    n: int = Field(default=5_000, ge=2)
    p: int = Field(default=5, ge=1)
    tau: float = 2.0
    effect: Literal["constant", "linear", "quadratic"] = "constant"
    gamma: Optional[List[float]] = None
    beta: Optional[List[float]] = None
    noise_sd: float = Field(default=1.0, ge=0)
    nonlinearity_weight: float = 1.0
    text_mode: Literal["none", "planted"] = "none"
    text_gamma: float = 1.0
    text_beta: float = 1.0
    doc_length: int = Field(default=20, ge=1)
    overlap_bound: float = Field(default=0.02, gt=0, lt=0.5)
    seed: int = 0

    @model_validator(mode="after")
    def _check_coefficients(self) -> "DgpConfig":
        for name in ("gamma", "beta"):
            value = getattr(self, name)
            if value is not None and len(value) != self.p:
                raise ValueError(f"{name} must have length p={self.p}")
        return self

    @property
    def gamma_vector(self) -> List[float]:
        return list(self.gamma) if self.gamma is not None else [0.0] * self.p

    @property
    def beta_vector(self) -> List[float]:
        return list(self.beta) if self.beta is not None else [0.0] * self.p


class EstimatorSpec(_Schema):
    """Which nuisance fit feeds which estimators inside a benchmark run."""
    methods: List[MethodName] = Field(default_factory=lambda: ["naive", "baseline", "dse", "dre", "tmle"])
    nuisance: Literal["linear", "mlp", "oracle"] = "linear"
    features: FeatureMode = "without_text"
    trim: Tuple[float, float] = (0.01, 0.99)
    lambda_selection: Literal["cv"] | float = "cv"
    oracle_outcome: Literal["true", "zero"] = "true"
    oracle_propensity_shift: float = 0.0
    settings: NuisanceSettings = Field(default_factory=NuisanceSettings)
    training: TrainConfig = Field(default_factory=TrainConfig)
    network: NetworkShape = Field(default_factory=NetworkShape)

    @field_validator("trim")
    @classmethod
    def _check_trim(cls, trim: Tuple[float, float]) -> Tuple[float, float]:
        return _validate_trim(trim)


class BenchSection(_Schema):
    dgp: DgpConfig = Field(default_factory=DgpConfig)
    estimator: EstimatorSpec = Field(default_factory=EstimatorSpec)
    replications: int = Field(default=100, ge=1)
    n_jobs: int = 1


# =============================================================================
# Whole run
# =============================================================================

class PathsConfig(_Schema):
    raw_data: Optional[str] = None
    embeddings: Optional[str] = None
    workspace: str = "workspace"


class SplitConfig(_Schema):
    fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    @model_validator(mode="after")
    def _check_fractions(self) -> "SplitConfig":
        if any(f <= 0 for f in self.fractions):
            raise ValueError("split fractions must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self


class RunConfig(_Schema):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    features: FeatureMode = "without_text"
    nuisance: NuisanceKind = "linear"
    methods: List[MethodName] = Field(default_factory=lambda: list(ALL_METHODS))
    trim: Tuple[float, float] = (0.01, 0.99)
    training: TrainConfig = Field(default_factory=TrainConfig)
    network: NetworkShape = Field(default_factory=NetworkShape)
    nuisance_settings: NuisanceSettings = Field(default_factory=NuisanceSettings)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    bench: Optional[BenchSection] = None

    @field_validator("trim")
    @classmethod
    def _check_trim(cls, trim: Tuple[float, float]) -> Tuple[float, float]:
        return _validate_trim(trim)


def _validate_trim(trim: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = trim
    if not (0.0 < lo < hi < 1.0):
        raise ValueError("trim must satisfy 0 < lo < hi < 1")
    return trim


# =============================================================================
# Loading and fingerprinting
# =============================================================================

def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Builds the effective RunConfig: defaults, then the JSON file, then flags.

    Raises:
        ConfigInvalid: naming the first offending field (dotted path).
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigInvalid("config", f"cannot read config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigInvalid("config", "config file must hold a JSON object")
    if overrides:
        data = _deep_merge(data, overrides)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigInvalid(field, f"{field}: {first['msg']}") from e


def config_hash(config: BaseModel) -> str:
    """First 16 hex chars of SHA-256 over the canonical JSON dump."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
