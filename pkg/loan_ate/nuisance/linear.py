"""
Elastic-net regression by cyclic coordinate descent, and its logistic
counterpart by iteratively reweighted coordinate descent.

Identity link minimizes

    (1/2n) sum (y_i - b0 - x_i.b)^2 + lam * (alpha * |b|_1 + (1 - alpha)/2 * |b|_2^2)

and the logistic link replaces the squared loss by the mean negative
log-likelihood. The intercept is never penalized.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from scipy.special import expit
from sklearn.model_selection import KFold, StratifiedKFold

from ..errors import NoConvergence, NonFiniteInput, NuisanceError, SingleClass

logger = logging.getLogger(__name__)

Link = Literal["identity", "logistic"]

PROBA_CLIP = 1e-12
# IRLS working weights are floored here so near-separated points keep a finite pseudo-response.
_MIN_IRLS_WEIGHT = 1e-5


@dataclass
class LinearFit:
    coefficients: np.ndarray
    intercept: float
    lam: float
    alpha: float
    link: Link = "identity"
    converged: bool = True
    n_iter: int = 0
    objective_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        assert self.lam >= 0, "lambda must be non-negative"
        assert 0.0 <= self.alpha <= 1.0, "alpha must lie in [0, 1]"

    @property
    def support(self) -> np.ndarray:
        """Indices of the non-zero coefficients."""
        return np.flatnonzero(self.coefficients)

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(x, dtype=np.float64) @ self.coefficients

    def predict(self, x: np.ndarray, clip: float = PROBA_CLIP) -> np.ndarray:
        """Fitted means; probabilities clipped to [clip, 1 - clip] for the logistic link."""
        eta = self.linear_predictor(x)
        if self.link == "identity":
            return eta
        return np.clip(expit(eta), clip, 1.0 - clip)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "lambda": self.lam,
            "alpha": self.alpha,
            "link": self.link,
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "LinearFit":
        return cls(
            coefficients=np.asarray(payload["coefficients"], dtype=np.float64),
            intercept=float(payload["intercept"]),
            lam=float(payload["lambda"]),
            alpha=float(payload["alpha"]),
            link=payload["link"],
            converged=bool(payload.get("converged", True)),
            n_iter=int(payload.get("n_iter", 0)),
        )


# =============================================================================
# Building blocks
# =============================================================================

def soft_threshold(z: float, gamma: float) -> float:
    """S(z, gamma) = sign(z) * max(|z| - gamma, 0)."""
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def penalty(beta: np.ndarray, lam: float, alpha: float) -> float:
    return lam * (alpha * np.abs(beta).sum() + 0.5 * (1.0 - alpha) * np.dot(beta, beta))


def _check_inputs(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise NuisanceError(f"design shape {x.shape} does not match target length {y.shape[0]}")
    if x.shape[0] < 2:
        raise NuisanceError("at least two rows are required")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise NonFiniteInput("design matrix or target contains non-finite values")
    return x, y


def _weighted_cd(
    x: np.ndarray,
    z: np.ndarray,
    v: np.ndarray,
    lam: float,
    alpha: float,
    beta: np.ndarray,
    tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, float, bool, int, List[float]]:
    """
    Coordinate descent on (1/2) sum v_i (z_i - b0 - x_i.b)^2 + penalty.

    The intercept is profiled out by weighted centering. Returns
    (beta, intercept, converged, sweeps, objective after each sweep).
    """
    v_sum = v.sum()
    x_mean = v @ x / v_sum
    z_mean = v @ z / v_sum
    xc = x - x_mean
    zc = z - z_mean
    col_sq = v @ (xc * xc)
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)

    beta = beta.copy()
    resid = zc - xc @ beta
    history: List[float] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        max_delta = 0.0
        for j in range(x.shape[1]):
            denom = col_sq[j] + l2
            old = beta[j]
            if denom <= 0.0:
                new = 0.0
            else:
                rho = np.dot(v * xc[:, j], resid) + col_sq[j] * old
                new = soft_threshold(rho, l1) / denom
            if new != old:
                resid -= xc[:, j] * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        history.append(0.5 * np.dot(v, resid * resid) + penalty(beta, lam, alpha))
        if max_delta < tol:
            converged = True
            break
    intercept = float(z_mean - x_mean @ beta)
    return beta, intercept, converged, sweeps, history


def lambda_max(x: np.ndarray, y: np.ndarray, alpha: float, link: Link = "identity") -> float:
    """Smallest lambda at which every coefficient is zero (alpha floored at 1e-3)."""
    x, y = _check_inputs(x, y)
    xc = x - x.mean(axis=0)
    # the null-model residual is y - mean(y) for both links
    grad = np.abs(xc.T @ (y - y.mean())) / x.shape[0]
    return float(grad.max()) / max(alpha, 1e-3) if grad.size else 0.0


def lambda_path(lam_max: float, n_lambdas: int = 50, min_ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced grid from lam_max down to lam_max * min_ratio."""
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambdas)


# =============================================================================
# Fits
# =============================================================================

def fit_elastic_net(
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    alpha: float = 0.5,
    tol: float = 1e-7,
    max_iter: int = 10_000,
    warm_start: Optional[np.ndarray] = None,
    strict: bool = False,
) -> LinearFit:
    """
    Elastic-net least squares by cyclic coordinate descent with soft-thresholding.

    Converges when the largest coefficient change in a sweep is below tol.

    Raises:
        NonFiniteInput: NaN or inf in x or y
        NoConvergence: only when strict; carries the partial fit
    """
    if lam < 0 or not 0.0 <= alpha <= 1.0:
        raise NuisanceError("lambda must be >= 0 and alpha in [0, 1]")
    x, y = _check_inputs(x, y)
    n, p = x.shape
    beta0 = np.zeros(p) if warm_start is None else np.asarray(warm_start, dtype=np.float64).copy()
    beta, intercept, converged, sweeps, history = _weighted_cd(
        x, y, np.full(n, 1.0 / n), lam, alpha, beta0, tol, max_iter,
    )
    fit = LinearFit(
        coefficients=beta, intercept=intercept, lam=lam, alpha=alpha, link="identity",
        converged=converged, n_iter=sweeps, objective_history=history,
    )
    if not converged:
        if strict:
            raise NoConvergence(max_iter, partial=fit)
        logger.warning("Elastic net did not converge in %d sweeps (lambda=%g, alpha=%g)", max_iter, lam, alpha)
    return fit


def _logistic_objective(x: np.ndarray, w: np.ndarray, b0: float, beta: np.ndarray, lam: float, alpha: float) -> float:
    eta = b0 + x @ beta
    # mean of log(1 + e^eta) - w * eta
    nll = np.mean(np.logaddexp(0.0, eta) - w * eta)
    return float(nll + penalty(beta, lam, alpha))


def fit_logistic_elastic_net(
    x: np.ndarray,
    w: np.ndarray,
    lam: float,
    alpha: float = 0.5,
    tol: float = 1e-7,
    max_iter: int = 10_000,
    max_outer: int = 100,
    warm_start: Optional[np.ndarray] = None,
    strict: bool = False,
) -> LinearFit:
    """
    Penalized logistic regression: each outer step forms the IRLS quadratic
    approximation and solves it by weighted coordinate descent, halving the
    step while the penalized objective increases.

    Raises:
        SingleClass: w holds only one class
        NoConvergence: only when strict
    """
    if lam < 0 or not 0.0 <= alpha <= 1.0:
        raise NuisanceError("lambda must be >= 0 and alpha in [0, 1]")
    x, w = _check_inputs(x, w)
    if not np.all(np.isin(w, (0.0, 1.0))):
        raise NuisanceError("treatment must be binary")
    if w.min() == w.max():
        raise SingleClass(f"treatment has a single class ({int(w[0])})")
    n, p = x.shape

    beta = np.zeros(p) if warm_start is None else np.asarray(warm_start, dtype=np.float64).copy()
    prevalence = w.mean()
    b0 = float(np.log(prevalence / (1.0 - prevalence)))
    objective = _logistic_objective(x, w, b0, beta, lam, alpha)
    history = [objective]
    converged = False
    total_sweeps = 0

    for _ in range(max_outer):
        eta = b0 + x @ beta
        prob = expit(eta)
        weight = np.maximum(prob * (1.0 - prob), _MIN_IRLS_WEIGHT)
        z = eta + (w - prob) / weight
        new_beta, new_b0, _, sweeps, _ = _weighted_cd(x, z, weight / n, lam, alpha, beta, tol, max_iter)
        total_sweeps += sweeps

        step = 1.0
        cand_beta, cand_b0 = new_beta, new_b0
        cand_obj = _logistic_objective(x, w, cand_b0, cand_beta, lam, alpha)
        while cand_obj > objective + 1e-12 and step > 1e-6:
            step *= 0.5
            cand_beta = beta + step * (new_beta - beta)
            cand_b0 = b0 + step * (new_b0 - b0)
            cand_obj = _logistic_objective(x, w, cand_b0, cand_beta, lam, alpha)

        delta = max(np.max(np.abs(cand_beta - beta), initial=0.0), abs(cand_b0 - b0))
        beta, b0, objective = cand_beta, cand_b0, cand_obj
        history.append(objective)
        if delta < tol:
            converged = True
            break

    fit = LinearFit(
        coefficients=beta, intercept=b0, lam=lam, alpha=alpha, link="logistic",
        converged=converged, n_iter=total_sweeps, objective_history=history,
    )
    if not converged:
        if strict:
            raise NoConvergence(max_outer, partial=fit)
        logger.warning("Logistic elastic net did not converge in %d IRLS steps (lambda=%g)", max_outer, lam)
    return fit


# =============================================================================
# Cross-validation
# =============================================================================

@dataclass
class LambdaSelection:
    best_lambda: float
    lambdas: np.ndarray
    cv_loss: np.ndarray


def _fit(x, y, lam, alpha, link, tol, max_iter, warm_start=None) -> LinearFit:
    if link == "identity":
        return fit_elastic_net(x, y, lam, alpha, tol=tol, max_iter=max_iter, warm_start=warm_start)
    return fit_logistic_elastic_net(x, y, lam, alpha, tol=tol, max_iter=max_iter, warm_start=warm_start)


def _holdout_loss(fit: LinearFit, x: np.ndarray, y: np.ndarray) -> float:
    if fit.link == "identity":
        return float(np.mean((y - fit.predict(x)) ** 2))
    p = fit.predict(x)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def select_lambda(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    link: Link = "identity",
    n_folds: int = 5,
    n_lambdas: int = 50,
    min_ratio: float = 1e-4,
    tol: float = 1e-7,
    max_iter: int = 10_000,
    seed: int = 0,
) -> LambdaSelection:
    """
    k-fold cross-validation over the log grid, warm-starting each fold's path.

    Held-out loss is mean squared error (identity) or mean deviance / 2
    (logistic); folds are stratified on the class for the logistic link.
    """
    x, y = _check_inputs(x, y)
    lambdas = lambda_path(lambda_max(x, y, alpha, link), n_lambdas, min_ratio)
    if link == "logistic":
        counts = np.bincount(y.astype(int), minlength=2)
        k = int(min(n_folds, counts.min()))
        if k < 2:
            raise SingleClass("too few units in the minority class for cross-validation")
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        folds = list(splitter.split(x, y.astype(int)))
    else:
        k = int(min(n_folds, x.shape[0]))
        folds = list(KFold(n_splits=k, shuffle=True, random_state=seed).split(x))

    losses = np.zeros((len(folds), len(lambdas)))
    for f, (train_idx, test_idx) in enumerate(folds):
        warm = None
        for j, lam in enumerate(lambdas):
            fit = _fit(x[train_idx], y[train_idx], lam, alpha, link, tol, max_iter, warm)
            warm = fit.coefficients
            losses[f, j] = _holdout_loss(fit, x[test_idx], y[test_idx])
    cv_loss = losses.mean(axis=0)
    best = float(lambdas[int(np.argmin(cv_loss))])
    logger.debug("Selected lambda=%g (%s link, alpha=%g) over %d folds", best, link, alpha, len(folds))
    return LambdaSelection(best_lambda=best, lambdas=lambdas, cv_loss=cv_loss)


def fit_with_selection(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    link: Link = "identity",
    lam: Optional[float] = None,
    n_folds: int = 5,
    n_lambdas: int = 50,
    min_ratio: float = 1e-4,
    tol: float = 1e-7,
    max_iter: int = 10_000,
    seed: int = 0,
) -> LinearFit:
    """Fits at `lam`, or at the cross-validated lambda when lam is None."""
    if lam is None:
        lam = select_lambda(x, y, alpha, link, n_folds, n_lambdas, min_ratio, tol, max_iter, seed).best_lambda
    return _fit(x, y, lam, alpha, link, tol, max_iter)
