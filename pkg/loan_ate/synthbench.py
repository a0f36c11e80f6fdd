"""
Synthetic data with a known average treatment effect, and a harness that
measures bias, RMSE and interval coverage of an estimator configuration.

    X ~ N(0, I_p)
    e(X) = sigmoid(X.gamma [+ text_gamma * u])
    Y(0) = X.beta + nl_weight * sin(2 X_1) [+ text_beta * u] + noise
    Y(1) = Y(0) + tau(X)

tau(X) is tau (constant), tau + X_1 (linear) or tau + X_1^2 (quadratic).
In planted-text mode every unit gets a token list drawn from the toy
vocabulary, tilted by a latent z; u is the first coordinate of the
description's mean embedding, so the confounder is a linear image of the
loan vector.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit, logit
from tqdm import tqdm

from .config import DgpConfig, EstimatorSpec
from .embed import EmbeddingTable, loan_sequences, loan_vectors, toy_embedding_table
from .errors import LoanAteError, OverlapViolation
from .estimators import AteEstimate, run_estimators
from .ingest import assign_splits
from .nuisance import NuisanceInputs, NuisancePredictions, fit_nuisances, linear_design

logger = logging.getLogger(__name__)

# strength of the latent tilt over the vocabulary in planted-text mode
TEXT_TILT = 2.0


# =============================================================================
# Generation
# =============================================================================

@dataclass
class SyntheticData:
    """One draw from the DGP, with potential outcomes and true nuisances."""
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    y1: np.ndarray
    y0: np.ndarray
    e: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    tau_i: np.ndarray
    split: np.ndarray
    seed: int
    tokens: Optional[List[Tuple[str, ...]]] = None
    confounder: Optional[np.ndarray] = None

    def __post_init__(self):
        assert np.array_equal(self.y, np.where(self.w == 1, self.y1, self.y0)), "observed Y must match potential outcomes"

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_ate(self) -> float:
        return float(np.mean(self.tau_i))

    def inputs(self, table: Optional[EmbeddingTable] = None, max_len: int = 200) -> NuisanceInputs:
        """Nuisance inputs; planted-text draws also carry loan vectors and sequences."""
        vectors, sequences = None, None
        if self.tokens is not None:
            table = table or toy_embedding_table()
            vectors, _ = loan_vectors(self.tokens, table)
            sequences = loan_sequences(self.tokens, table, max_len)
        return NuisanceInputs(
            x=self.x,
            y=self.y,
            w=self.w,
            split=self.split,
            unit_ids=np.arange(len(self.y)),
            loan_vectors=vectors,
            sequences=sequences,
        )


def effect(config: DgpConfig, x: np.ndarray) -> np.ndarray:
    """Per-unit treatment effect tau(x)."""
    if config.effect == "constant":
        return np.full(x.shape[0], config.tau)
    if config.effect == "linear":
        return config.tau + x[:, 0]
    return config.tau + x[:, 0] ** 2


def _planted_text(rng: np.random.Generator, n: int, config: DgpConfig, table: EmbeddingTable):
    signal = table.vectors[:, 0]
    latent = rng.standard_normal(n)
    tokens: List[Tuple[str, ...]] = []
    confounder = np.empty(n)
    for i in range(n):
        logits = TEXT_TILT * latent[i] * signal
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        picks = rng.choice(len(signal), size=config.doc_length, p=probs)
        tokens.append(tuple(table.tokens[k] for k in picks))
        confounder[i] = signal[picks].mean()
    return tokens, confounder


def generate(config: DgpConfig, table: Optional[EmbeddingTable] = None) -> SyntheticData:
    """
    Draws one dataset. Identical configs give bitwise-identical draws.

    Raises:
        OverlapViolation: a true propensity falls outside the overlap bound
    """
    rng = np.random.default_rng(config.seed)
    n, p = config.n, config.p
    x = rng.standard_normal((n, p))
    gamma = np.asarray(config.gamma_vector)
    beta = np.asarray(config.beta_vector)

    logits = x @ gamma
    base = x @ beta + config.nonlinearity_weight * np.sin(2.0 * x[:, 0])
    tokens, confounder = None, None
    if config.text_mode == "planted":
        tokens, confounder = _planted_text(rng, n, config, table or toy_embedding_table())
        logits = logits + config.text_gamma * confounder
        base = base + config.text_beta * confounder

    e = expit(logits)
    bound = config.overlap_bound
    outside = int(np.sum((e <= bound) | (e >= 1.0 - bound)))
    if outside:
        raise OverlapViolation(
            f"{outside} true propensities fall outside ({bound}, {1 - bound})",
            n_outside=outside, min_e=float(e.min()), max_e=float(e.max()),
        )

    w = (rng.random(n) < e).astype(np.int64)
    noise = config.noise_sd * rng.standard_normal(n)
    tau_i = effect(config, x)
    mu0 = base
    mu1 = base + tau_i
    y0 = mu0 + noise
    y1 = mu1 + noise
    y = np.where(w == 1, y1, y0)
    split = np.array(assign_splits(n, (0.6, 0.2, 0.2), config.seed))
    return SyntheticData(
        x=x, w=w, y=y, y1=y1, y0=y0, e=e, mu1=mu1, mu0=mu0, tau_i=tau_i,
        split=split, seed=config.seed, tokens=tokens, confounder=confounder,
    )


@dataclass(frozen=True)
class TrueAte:
    value: float
    mc_se: float = 0.0


def true_ate(config: DgpConfig, n_draws: int = 1_000_000, seed: Optional[int] = None) -> TrueAte:
    """Analytic for a constant effect; Monte-Carlo mean and its SE otherwise."""
    if config.effect == "constant":
        return TrueAte(value=float(config.tau))
    rng = np.random.default_rng(config.seed if seed is None else seed)
    x1 = rng.standard_normal((n_draws, 1))
    tau_i = effect(config, x1)
    return TrueAte(value=float(tau_i.mean()), mc_se=float(tau_i.std(ddof=1) / np.sqrt(n_draws)))


def oracle_nuisances(
    data: SyntheticData,
    outcome: str = "true",
    propensity_shift: float = 0.0,
) -> NuisancePredictions:
    """
    True nuisances: mu from the DGP (or identically 0 with outcome="zero"),
    e from the DGP with its logit shifted by propensity_shift.
    """
    if outcome == "zero":
        mu1, mu0 = np.zeros(len(data)), np.zeros(len(data))
    else:
        mu1, mu0 = data.mu1.copy(), data.mu0.copy()
    e = expit(logit(data.e) + propensity_shift)
    return NuisancePredictions(
        unit_id=np.arange(len(data)), w=data.w, y=data.y, mu1=mu1, mu0=mu0, e=e,
        tags={"kind": "oracle", "outcome": outcome, "propensity_shift": str(propensity_shift)},
    )


def bootstrap_se(
    estimator: Callable[[NuisancePredictions], AteEstimate],
    predictions: NuisancePredictions,
    n_boot: int = 500,
    seed: int = 0,
) -> float:
    """Standard deviation of the estimate over unit-level resamples, nuisances held fixed."""
    rng = np.random.default_rng(seed)
    n = len(predictions)
    draws = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        resampled = NuisancePredictions(
            unit_id=predictions.unit_id[idx], w=predictions.w[idx], y=predictions.y[idx],
            mu1=predictions.mu1[idx], mu0=predictions.mu0[idx], e=predictions.e[idx],
        )
        draws[b] = estimator(resampled).tau_hat
    return float(draws.std(ddof=1))


# =============================================================================
# Benchmark
# =============================================================================

REPLICATION_COLUMNS = ["replication", "seed", "method", "tau_hat", "se", "ci_lo", "ci_hi", "covered", "true_ate", "error"]
SUMMARY_COLUMNS = ["method", "n_ok", "n_failed", "bias", "rmse", "coverage", "mean_se", "sd_tau", "bias_mc_se"]


@dataclass
class BenchResult:
    true_ate: float
    replications: pd.DataFrame
    summary: pd.DataFrame
    config: Dict[str, Any] = field(default_factory=dict)

    def aggregate(self, method: str) -> Dict[str, Any]:
        row = self.summary[self.summary["method"] == method]
        if row.empty:
            raise KeyError(method)
        return row.iloc[0].to_dict()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "true_ate": self.true_ate,
            "summary": self.summary.to_dict(orient="records"),
            "config": self.config,
        }


def _predictions(data: SyntheticData, inputs: NuisanceInputs, spec: EstimatorSpec) -> NuisancePredictions:
    if spec.nuisance == "oracle":
        return oracle_nuisances(data, spec.oracle_outcome, spec.oracle_propensity_shift)
    settings = spec.settings
    if spec.lambda_selection != "cv":
        lam = float(spec.lambda_selection)
        settings = settings.model_copy(update={"outcome_lambda": lam, "propensity_lambda": lam})
    return fit_nuisances(spec.nuisance, inputs, spec.features, settings, spec.training, spec.network)


def run_replication(dgp: DgpConfig, spec: EstimatorSpec, replication: int, tau: float) -> List[Dict[str, Any]]:
    """One replication; pipeline errors become rows with an `error` value."""
    seed = dgp.seed + replication
    base = {"replication": replication, "seed": seed, "true_ate": tau}
    try:
        data = generate(dgp.model_copy(update={"seed": seed}))
        inputs = data.inputs(max_len=spec.settings.max_len)
        needs_predictions = any(m in ("baseline", "dre", "tmle") for m in spec.methods)
        predictions = _predictions(data, inputs, spec) if needs_predictions else None
        design = linear_design(inputs, spec.features) if "dse" in spec.methods else None
        estimates = run_estimators(
            spec.methods, predictions, data.y, data.w, design,
            trim=spec.trim, lambda_selection=spec.lambda_selection, settings=spec.settings,
        )
    except LoanAteError as e:
        return [{**base, "method": m, "error": f"{e.__class__.__name__}: {e.message}"} for m in spec.methods]

    return [
        {
            **base,
            "method": est.method,
            "tau_hat": est.tau_hat,
            "se": est.se,
            "ci_lo": est.ci95[0],
            "ci_hi": est.ci95[1],
            "covered": bool(est.covers(tau)),
            "error": None,
        }
        for est in estimates
    ]


def summarize(replications: pd.DataFrame, methods: List[str]) -> pd.DataFrame:
    rows = []
    for method in methods:
        sub = replications[replications["method"] == method]
        ok = sub[sub["error"].isna()]
        tau_hat = ok["tau_hat"].to_numpy(dtype=np.float64)
        errors = tau_hat - ok["true_ate"].to_numpy(dtype=np.float64)
        n_ok = len(ok)
        sd = float(np.std(tau_hat, ddof=1)) if n_ok > 1 else float("nan")
        rows.append({
            "method": method,
            "n_ok": n_ok,
            "n_failed": int(len(sub) - n_ok),
            "bias": float(errors.mean()) if n_ok else float("nan"),
            "rmse": float(np.sqrt(np.mean(errors ** 2))) if n_ok else float("nan"),
            "coverage": float(ok["covered"].astype(bool).mean()) if n_ok else float("nan"),
            "mean_se": float(ok["se"].mean()) if n_ok else float("nan"),
            "sd_tau": sd,
            "bias_mc_se": sd / np.sqrt(n_ok) if n_ok > 1 else float("nan"),
        })
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


class BenchRunner:
    """Runs replications with derived seeds (seed + index), in parallel with joblib."""

    def __init__(self, dgp: DgpConfig, spec: EstimatorSpec, n_jobs: int = 1, verbose: bool = False):
        self.dgp = dgp
        self.spec = spec
        self.n_jobs = n_jobs
        self.verbose = verbose

    def _log(self, msg: str):
        if self.verbose:
            logger.debug(msg)

    def run(self, replications: int) -> BenchResult:
        if replications < 1:
            raise ValueError("replications must be >= 1")
        tau = true_ate(self.dgp).value
        self._log(f"True ATE {tau:.6f}; running {replications} replications on {self.n_jobs} job(s)")
        jobs = (delayed(run_replication)(self.dgp, self.spec, r, tau) for r in range(replications))
        batches = Parallel(n_jobs=self.n_jobs)(
            tqdm(jobs, total=replications, unit="rep", disable=not self.verbose)
        )
        rows = [row for batch in batches for row in batch]
        frame = pd.DataFrame(rows, columns=REPLICATION_COLUMNS)
        failed = int(frame["error"].notna().sum())
        if failed:
            logger.warning("%d estimator runs failed across %d replications", failed, replications)
        summary = summarize(frame, list(self.spec.methods))
        return BenchResult(
            true_ate=tau,
            replications=frame,
            summary=summary,
            config={"dgp": self.dgp.model_dump(mode="json"), "estimator": self.spec.model_dump(mode="json")},
        )


def run_bench(
    dgp: DgpConfig,
    spec: EstimatorSpec,
    replications: int,
    n_jobs: int = 1,
    verbose: bool = False,
) -> BenchResult:
    return BenchRunner(dgp, spec, n_jobs=n_jobs, verbose=verbose).run(replications)
