"""
Average-treatment-effect estimators and the OLS inference helper.

    naive     difference in arm means
    baseline  mean of mu1 - mu0 from per-arm regressions
    dse       double selection: lasso supports for Y|treated, Y|control and W,
              then per-arm OLS on their union
    dre       augmented inverse-propensity weighting with sandwich SE
    tmle      dre over outcome predictions updated along the clever covariate

Every estimate carries a 95% interval tau_hat +- 1.959964 * se.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm

from .config import NuisanceSettings
from .errors import (
    AllTrimmed,
    DegenerateFluctuation,
    EmptyArm,
    EstimationError,
    NonFinitePrediction,
    RankDeficient,
)
from .ingest import Dataset
from .nuisance import NuisancePredictions, fit_with_selection

logger = logging.getLogger(__name__)

Z_975 = 1.959964
T_CRITICAL = 1.96


# =============================================================================
# Types
# =============================================================================

@dataclass
class AteEstimate:
    tau_hat: float
    se: float
    ci95: Tuple[float, float]
    method: str
    n_used: int
    n_total: int
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    # per-unit influence values on the units used (dre, tmle); not serialized
    influence: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        assert self.n_used <= self.n_total, "n_used cannot exceed n_total"

    @classmethod
    def make(
        cls, method: str, tau_hat: float, se: float, n_used: int, n_total: int,
        influence: Optional[np.ndarray] = None, **diagnostics,
    ) -> "AteEstimate":
        half = Z_975 * se
        return cls(
            tau_hat=float(tau_hat),
            se=float(se),
            ci95=(float(tau_hat - half), float(tau_hat + half)),
            method=method,
            n_used=int(n_used),
            n_total=int(n_total),
            diagnostics=diagnostics,
            influence=influence,
        )

    def covers(self, tau: float) -> bool:
        return self.ci95[0] <= tau <= self.ci95[1]

    def to_dict(self) -> Dict[str, Any]:
        row = asdict(self)
        row.pop("influence")
        row["ci95"] = list(self.ci95)
        return row


@dataclass
class OlsFit:
    """Coefficient vectors include the intercept at index 0."""
    coefficients: np.ndarray
    standard_errors: np.ndarray
    t_stats: np.ndarray
    r_squared: float
    residual_se: float
    n: int

    @property
    def n_significant(self) -> int:
        """Non-intercept coefficients with |t| > 1.96."""
        return int(np.sum(np.abs(np.nan_to_num(self.t_stats[1:])) > T_CRITICAL))


# =============================================================================
# Helpers
# =============================================================================

def _arms(w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    w = np.asarray(w)
    treated = w == 1
    control = w == 0
    if not treated.any():
        raise EmptyArm("no treated units", arm="treated")
    if not control.any():
        raise EmptyArm("no control units", arm="control")
    return treated, control


def trim_mask(e: np.ndarray, trim: Tuple[float, float] = (0.01, 0.99)) -> np.ndarray:
    """Units whose propensity lies in [lo, hi]."""
    lo, hi = trim
    if not 0.0 <= lo < hi <= 1.0:
        raise EstimationError(f"invalid trimming interval [{lo}, {hi}]")
    e = np.asarray(e, dtype=np.float64)
    return (e >= lo) & (e <= hi)


def _residual_se(res_treated: np.ndarray, res_control: np.ndarray) -> float:
    """sqrt(V1 + V0) with V = var(residuals) / (n_arm - 1)."""
    n_t, n_c = len(res_treated), len(res_control)
    if n_t < 2 or n_c < 2:
        raise EmptyArm(f"each arm needs at least two units (treated={n_t}, control={n_c})")
    v1 = np.var(res_treated) / (n_t - 1)
    v0 = np.var(res_control) / (n_c - 1)
    return float(np.sqrt(v1 + v0))


def _checked(predictions: NuisancePredictions, y=None, w=None):
    y = np.asarray(predictions.y if y is None else y, dtype=np.float64)
    w = np.asarray(predictions.w if w is None else w).astype(np.int64)
    mu1 = np.asarray(predictions.mu1, dtype=np.float64)
    mu0 = np.asarray(predictions.mu0, dtype=np.float64)
    e = np.asarray(predictions.e, dtype=np.float64)
    for name, arr in (("y", y), ("mu1", mu1), ("mu0", mu0), ("e", e)):
        if not np.all(np.isfinite(arr)):
            raise NonFinitePrediction(f"{name} contains non-finite values", column=name)
    return y, w, mu1, mu0, e


# =============================================================================
# Naive / baseline
# =============================================================================

def naive_ate(y: np.ndarray, w: np.ndarray) -> AteEstimate:
    """Difference in means; se from the (n-1) sample variances of each arm."""
    y = np.asarray(y, dtype=np.float64)
    treated, control = _arms(w)
    y1, y0 = y[treated], y[control]
    tau = y1.mean() - y0.mean()
    if len(y1) < 2 or len(y0) < 2:
        logger.warning("An arm has a single unit; the naive standard error is undefined")
        se = float("nan")
    else:
        se = float(np.sqrt(y1.var(ddof=1) / len(y1) + y0.var(ddof=1) / len(y0)))
    return AteEstimate.make("naive", tau, se, len(y), len(y), n_treated=int(treated.sum()), n_control=int(control.sum()))


def baseline_ate(predictions: NuisancePredictions, y: Optional[np.ndarray] = None, w: Optional[np.ndarray] = None) -> AteEstimate:
    """Mean of mu1 - mu0 over all units; se = sqrt(V1 + V0) from per-arm residuals."""
    y, w, mu1, mu0, _ = _checked(predictions, y, w)
    treated, control = _arms(w)
    tau = np.mean(mu1 - mu0)
    se = _residual_se(y[treated] - mu1[treated], y[control] - mu0[control])
    return AteEstimate.make("baseline", tau, se, len(y), len(y))


# =============================================================================
# Double selection
# =============================================================================

def _lasso_support(x, target, link, lam, settings: NuisanceSettings) -> np.ndarray:
    fit = fit_with_selection(
        x, target, alpha=1.0, link=link, lam=lam,
        n_folds=settings.n_folds, n_lambdas=settings.n_lambdas, min_ratio=settings.lambda_min_ratio,
        tol=settings.tol, max_iter=settings.max_iter, seed=settings.seed,
    )
    return fit.support


def _arm_ols(x_arm: np.ndarray, y_arm: np.ndarray, columns: np.ndarray):
    """OLS of Y on the selected columns within one arm (pseudo-inverse, constant columns dropped)."""
    sub = x_arm[:, columns]
    varying = columns[np.ptp(sub, axis=0) > 0] if len(columns) else columns
    design = np.column_stack([np.ones(len(y_arm)), x_arm[:, varying]])
    result = sm.OLS(y_arm, design).fit()
    return varying, np.asarray(result.params)


def dse_ate(
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    lambda_selection: str | float = "cv",
    settings: Optional[NuisanceSettings] = None,
) -> AteEstimate:
    """
    Double selection: union of the lasso supports of Y on X (treated),
    Y on X (control) and W on X (logistic), then per-arm OLS on the union.

    An empty union falls back to intercept-only OLS, which reproduces the
    naive difference in means.
    """
    settings = settings or NuisanceSettings()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w).astype(np.int64)
    treated, control = _arms(w)
    lam = None if lambda_selection == "cv" else float(lambda_selection)

    supports = {
        "outcome_treated": _lasso_support(x[treated], y[treated], "identity", lam, settings),
        "outcome_control": _lasso_support(x[control], y[control], "identity", lam, settings),
        "treatment": _lasso_support(x, w, "logistic", lam, settings),
    }
    selected = np.union1d(np.union1d(supports["outcome_treated"], supports["outcome_control"]), supports["treatment"])
    selected = selected.astype(np.int64)
    if len(selected) == 0:
        logger.warning("Double selection kept no covariate; falling back to intercept-only OLS")

    cols1, coef1 = _arm_ols(x[treated], y[treated], selected)
    cols0, coef0 = _arm_ols(x[control], y[control], selected)
    y1_hat = coef1[0] + x[:, cols1] @ coef1[1:]
    y0_hat = coef0[0] + x[:, cols0] @ coef0[1:]

    tau = np.mean(y1_hat - y0_hat)
    se = _residual_se(y[treated] - y1_hat[treated], y[control] - y0_hat[control])
    return AteEstimate.make(
        "dse", tau, se, len(y), len(y),
        selected=selected.tolist(),
        **{f"support_{k}": v.tolist() for k, v in supports.items()},
    )


# =============================================================================
# Doubly robust / TMLE
# =============================================================================

def _aipw(y, w, mu1, mu0, e) -> Tuple[float, np.ndarray]:
    psi = w * (y - mu1) / e - (1 - w) * (y - mu0) / (1.0 - e) + mu1 - mu0
    tau = float(np.mean(psi))
    return tau, psi - tau


def _trimmed(predictions: NuisancePredictions, y, w, trim):
    y, w, mu1, mu0, e = _checked(predictions, y, w)
    keep = trim_mask(e, trim)
    if not keep.any():
        raise AllTrimmed(f"no unit has a propensity inside [{trim[0]}, {trim[1]}]", n_total=len(e))
    if np.any((e[keep] <= 0.0) | (e[keep] >= 1.0)):
        raise NonFinitePrediction("propensities must lie strictly inside (0, 1)", column="e")
    diagnostics = {
        "n_trimmed_low": int(np.sum(e < trim[0])),
        "n_trimmed_high": int(np.sum(e > trim[1])),
        "trim": list(trim),
    }
    return (y[keep], w[keep], mu1[keep], mu0[keep], e[keep]), len(e), diagnostics


def dre_ate(
    predictions: NuisancePredictions,
    y: Optional[np.ndarray] = None,
    w: Optional[np.ndarray] = None,
    trim: Tuple[float, float] = (0.01, 0.99),
) -> AteEstimate:
    """
    Doubly robust estimate on the units with e in [lo, hi]; n is recomputed
    after trimming. se = sqrt(mean(IC^2) / n).
    """
    (y, w, mu1, mu0, e), n_total, diagnostics = _trimmed(predictions, y, w, trim)
    tau, ic = _aipw(y, w, mu1, mu0, e)
    n = len(y)
    se = float(np.sqrt(np.mean(ic ** 2) / n))
    return AteEstimate.make("dre", tau, se, n, n_total, influence=ic, **diagnostics)


def tmle_ate(
    predictions: NuisancePredictions,
    y: Optional[np.ndarray] = None,
    w: Optional[np.ndarray] = None,
    trim: Tuple[float, float] = (0.01, 0.99),
) -> AteEstimate:
    """
    Targeted update: H(w, x) = w/e - (1-w)/(1-e),
    epsilon = sum H (Y - mu_W) / sum H^2, Q(w, x) = mu(w, x) + epsilon H(w, x),
    then the doubly robust formula and its IC with Q in place of mu.

    Raises:
        DegenerateFluctuation: sum H^2 < 1e-12
    """
    (y, w, mu1, mu0, e), n_total, diagnostics = _trimmed(predictions, y, w, trim)
    h = w / e - (1 - w) / (1.0 - e)
    denom = float(np.sum(h ** 2))
    if denom < 1e-12:
        raise DegenerateFluctuation("clever covariate has no variation", sum_h_squared=denom)
    mu_w = np.where(w == 1, mu1, mu0)
    epsilon = float(np.sum(h * (y - mu_w)) / denom)
    q1 = mu1 + epsilon / e
    q0 = mu0 - epsilon / (1.0 - e)

    tau, ic = _aipw(y, w, q1, q0, e)
    n = len(y)
    se = float(np.sqrt(np.mean(ic ** 2) / n))
    return AteEstimate.make("tmle", tau, se, n, n_total, influence=ic, epsilon_hat=epsilon, **diagnostics)


# =============================================================================
# OLS with inference
# =============================================================================

def ols_fit(x: np.ndarray, y: np.ndarray) -> OlsFit:
    """
    Least squares with an intercept and homoskedastic standard errors,
    sigma^2 = RSS / (n - p - 1). t-stats are NaN where se = 0.

    Raises:
        RankDeficient: n <= p + 1 or the intercept-augmented design is not full rank
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    design = np.column_stack([np.ones(n), x])
    if n <= p + 1:
        raise RankDeficient(f"need more than {p + 1} rows, got {n}", n=n, p=p)
    rank = np.linalg.matrix_rank(design)
    if rank < p + 1:
        raise RankDeficient(f"design has rank {rank} < {p + 1}", rank=int(rank), p=p)

    result = sm.OLS(y, design).fit()
    coef = np.asarray(result.params)
    se = np.asarray(result.bse)
    t_stats = np.full_like(coef, np.nan)
    positive = se > 0
    t_stats[positive] = coef[positive] / se[positive]
    rss = float(np.sum(result.resid ** 2))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    return OlsFit(
        coefficients=coef,
        standard_errors=se,
        t_stats=t_stats,
        r_squared=float(r2),
        residual_se=float(np.sqrt(rss / (n - p - 1))),
        n=n,
    )


@dataclass
class RelatednessEntry:
    name: str
    n_coefficients: int
    n_significant: int
    n_significant_text: int
    error: Optional[str] = None


def relatedness_report(
    loan_vectors: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
) -> List[RelatednessEntry]:
    """
    How strongly the description vectors relate to outcome and treatment:
    Y on text per arm, W on text + covariates, Y on W + text + covariates.
    Counts coefficients with |t| > 1.96 (intercept excluded). A rank-deficient
    regression is reported through `error` instead of aborting the report.
    """
    v = np.asarray(loan_vectors, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w).astype(np.int64)
    d = v.shape[1]
    treated, control = _arms(w)
    # (name, design, target, column slice of the text dims among non-intercept coefficients)
    regressions = [
        ("y_on_text_treated", v[treated], y[treated], slice(0, d)),
        ("y_on_text_control", v[control], y[control], slice(0, d)),
        ("w_on_text_and_covariates", np.hstack([v, x]), w.astype(np.float64), slice(0, d)),
        ("y_on_w_text_and_covariates", np.hstack([w[:, None], v, x]), y, slice(1, d + 1)),
    ]
    entries = []
    for name, design, target, text_cols in regressions:
        try:
            fit = ols_fit(design, target)
        except RankDeficient as e:
            logger.warning("Relatedness regression %s: %s", name, e.message)
            entries.append(RelatednessEntry(name, design.shape[1], 0, 0, error=f"RankDeficient: {e.message}"))
            continue
        t_text = np.nan_to_num(fit.t_stats[1:][text_cols])
        entries.append(RelatednessEntry(
            name=name,
            n_coefficients=design.shape[1],
            n_significant=fit.n_significant,
            n_significant_text=int(np.sum(np.abs(t_text) > T_CRITICAL)),
        ))
    return entries


def loan_amount_ols(dataset: Dataset) -> pd.DataFrame:
    """Per-arm simple regression of funding time on the raw loan amount (dollars)."""
    amount = dataset.destandardized_loan_amount()
    y, w = dataset.y, dataset.w
    rows = []
    for arm, label in ((1, "treated"), (0, "control")):
        mask = w == arm
        try:
            fit = ols_fit(amount[mask], y[mask])
        except RankDeficient as e:
            logger.warning("Loan-amount regression (%s): %s", label, e.message)
            continue
        rows.append({
            "arm": label,
            "n": fit.n,
            "intercept": fit.coefficients[0],
            "slope": fit.coefficients[1],
            "se_slope": fit.standard_errors[1],
            "t_slope": fit.t_stats[1],
            "r_squared": fit.r_squared,
        })
    return pd.DataFrame(rows, columns=["arm", "n", "intercept", "slope", "se_slope", "t_slope", "r_squared"])


# =============================================================================
# Running and reporting
# =============================================================================

def run_estimators(
    methods: Sequence[str],
    predictions: Optional[NuisancePredictions],
    y: np.ndarray,
    w: np.ndarray,
    design: Optional[np.ndarray] = None,
    trim: Tuple[float, float] = (0.01, 0.99),
    lambda_selection: str | float = "cv",
    settings: Optional[NuisanceSettings] = None,
) -> List[AteEstimate]:
    """Runs each requested method; methods needing nuisances or a design fail loudly without them."""
    estimates = []
    for method in methods:
        if method == "naive":
            estimates.append(naive_ate(y, w))
        elif method == "dse":
            if design is None:
                raise EstimationError("dse needs the covariate design matrix")
            estimates.append(dse_ate(design, y, w, lambda_selection, settings))
        elif predictions is None:
            raise EstimationError(f"{method} needs nuisance predictions")
        elif method == "baseline":
            estimates.append(baseline_ate(predictions, y, w))
        elif method == "dre":
            estimates.append(dre_ate(predictions, y, w, trim))
        elif method == "tmle":
            estimates.append(tmle_ate(predictions, y, w, trim))
        else:
            raise EstimationError(f"unknown method: {method}")
    return estimates


REPORT_COLUMNS = ["method", "features", "nuisance", "tau_hat", "se", "ci_lo", "ci_hi", "n_used", "n_total"]


@dataclass
class AteReport:
    """One row per (method, features, nuisance)."""
    rows: List[Dict[str, Any]] = field(default_factory=list)

    def add(self, estimate: AteEstimate, features: str, nuisance: str) -> None:
        self.rows.append({
            "method": estimate.method,
            "features": features,
            "nuisance": nuisance if estimate.method not in ("naive", "dse") else "-",
            "tau_hat": estimate.tau_hat,
            "se": estimate.se,
            "ci_lo": estimate.ci95[0],
            "ci_hi": estimate.ci95[1],
            "n_used": estimate.n_used,
            "n_total": estimate.n_total,
            "diagnostics": estimate.diagnostics,
        })

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def to_dict(self) -> Dict[str, Any]:
        return {"estimates": self.rows}
