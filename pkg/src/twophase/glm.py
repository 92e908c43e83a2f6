"""Weighted, prior-penalized logistic regression with analytic influence functions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import PriorSpec
from .errors import (
    ConvergenceError,
    DataError,
    SeparationError,
    SingularInformationError,
    VarianceError,
)

MAX_ITER = 50
SCORE_TOL = 1e-8
STEP_TOL = 1e-10
ETA_CAP = 30.0
# objective changes below this (relative) are floating-point noise
OBJ_SLACK = 1e-12


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    total_information: np.ndarray
    converged: bool
    iterations: int
    deviance: float
    objective_trace: tuple[float, ...] = field(default=(), repr=False)
    penalized: bool = False

    @property
    def covariance(self) -> np.ndarray:
        """Inverse information: the Laplace posterior covariance for a penalized fit."""
        return np.linalg.inv(self.total_information)


@dataclass(frozen=True)
class InfluenceSet:
    h: np.ndarray
    target_column: int = 0

    @property
    def target(self) -> np.ndarray:
        return self.h[:, self.target_column]


def _precision(prior: PriorSpec | None, p: int) -> tuple[np.ndarray, np.ndarray]:
    if prior is None:
        return np.zeros(p), np.zeros(p)
    prior.check_width(p)
    return prior.mean, 1.0 / prior.variance  # 1/inf == 0 for flat coordinates


def penalized_objective(beta, X, y, w, prior: PriorSpec | None = None) -> float:
    """``sum w [y eta - log(1 + e^eta)] - 1/2 sum (beta - m)^2 / v``."""
    m, prec = _precision(prior, X.shape[1])
    eta = X @ beta
    ll = np.sum(w * (y * eta - np.logaddexp(0.0, eta)))
    return float(ll - 0.5 * np.sum(prec * (beta - m) ** 2))


def penalized_score(beta, X, y, w, prior: PriorSpec | None = None) -> np.ndarray:
    m, prec = _precision(prior, X.shape[1])
    return X.T @ (w * (y - expit(X @ beta))) - prec * (beta - m)


def _information(X, w, mu, prec) -> np.ndarray:
    info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
    info[np.diag_indices_from(info)] += prec
    return info


def _solve(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        c = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformationError("information matrix is singular; design is rank deficient") from None
    return np.linalg.solve(c.T, np.linalg.solve(c, rhs))


def fit_weighted_logistic(X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None,
                          prior: PriorSpec | None = None, *, max_iter: int = MAX_ITER,
                          score_tol: float = SCORE_TOL, step_tol: float = STEP_TOL,
                          allow_separation: bool = False) -> FitResult:
    """Maximize the weighted, prior-penalized logistic log-likelihood by IRLS.

    Newton steps are halved until the objective does not decrease. With no
    prior (or a flat one) this is the weighted MLE, and a linear predictor
    beyond +/-30 is taken as separation. ``allow_separation`` turns that into
    an early stop returning the saturated iterate with ``converged=False``.

    Raises
    ------
    SeparationError
        Unpenalized fit drove ``|eta|`` past the cap.
    ConvergenceError
        No convergence after ``max_iter`` iterations; carries the last iterate.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if y.shape != (n,) or w.shape != (n,):
        raise DataError("X, y and w disagree in length")
    if np.any(~(w > 0)):
        raise DataError("weights must be positive")
    m, prec = _precision(prior, p)
    penalized = bool(np.any(prec > 0))
    guarded = not allow_separation

    beta = np.where(np.isfinite(m) & (prec > 0), m, 0.0)
    obj = penalized_objective(beta, X, y, w, prior)
    trace = [obj]
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta
        if np.max(np.abs(eta)) > ETA_CAP and not penalized:
            if guarded:
                raise SeparationError(
                    "linear predictor exceeded +/-30: the data look separated; "
                    "supply an informative prior")
            separated = True
            break
        mu = expit(np.clip(eta, -ETA_CAP, ETA_CAP))
        score = X.T @ (w * (y - mu)) - prec * (beta - m)
        info = _information(X, w, mu, prec)
        step = _solve(info, score)
        rel = np.max(np.abs(step)) / max(1.0, np.max(np.abs(beta)))
        if np.max(np.abs(score)) < score_tol and rel < step_tol:
            converged = True
            break
        t = 1.0
        while True:
            cand = beta + t * step
            cand_obj = penalized_objective(cand, X, y, w, prior)
            if cand_obj >= obj - OBJ_SLACK * (1.0 + abs(obj)):
                break
            t *= 0.5
            if t < 1e-10:
                break
        if t < 1e-10 or rel < 1e-15:
            # no further ascent is representable in floating point
            converged = np.max(np.abs(score)) < 1e-6 * max(1.0, float(np.sum(w)))
            break
        beta, obj = cand, cand_obj
        trace.append(obj)
    if not converged and not separated:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", last_iterate=beta)

    eta = X @ beta
    mu = expit(eta)
    info = _information(X, w, mu, prec)
    dev = -2.0 * float(np.sum(w * (y * -np.logaddexp(0.0, -eta) + (1 - y) * -np.logaddexp(0.0, eta))))
    return FitResult(beta, info, converged, it, dev, tuple(trace), penalized)


def influence_functions(fit: FitResult, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None,
                        target_column: int = 0) -> InfluenceSet:
    """One-step delta-betas ``I^{-1} w_i (y_i - mu_i) x_i``.

    Unnormalized, so ``beta_hat - beta_0`` is approximately ``sum_i h_i``.
    """
    X = np.asarray(X, dtype=float)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=float)
    resid = w * (np.asarray(y, dtype=float) - expit(X @ fit.beta_hat))
    h = _solve(fit.total_information, (X * resid[:, None]).T).T
    return InfluenceSet(h, target_column)


def sandwich_variance(influence: InfluenceSet | np.ndarray, strata: np.ndarray,
                      stratum_sizes: np.ndarray) -> np.ndarray:
    """Stratified variance of ``sum_i h_i`` over sampled rows.

    ``h`` already carries the sampling weight. Per stratum the contribution is
    ``(1 - n_h/N_h) * n_h/(n_h - 1) * sum_i (h_i - hbar)(h_i - hbar)^T``,
    i.e. the with-replacement formula with a finite-population correction.
    """
    h = influence.h if isinstance(influence, InfluenceSet) else np.asarray(influence, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    strata = np.asarray(strata)
    N = np.asarray(stratum_sizes)
    p = h.shape[1]
    V = np.zeros((p, p))
    for s in np.unique(strata):
        hs = h[strata == s]
        n_s = len(hs)
        if n_s < 2:
            raise VarianceError(f"stratum {s} has n_h={n_s} < 2; variance is not estimable")
        fpc = 1.0 - n_s / N[s]
        if fpc <= 0:
            continue
        d = hs - hs.mean(axis=0)
        V += fpc * n_s / (n_s - 1) * (d.T @ d)
    return V
