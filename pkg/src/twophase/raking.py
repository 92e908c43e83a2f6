"""Generalized raking of phase-2 weights to cohort totals of plug-in influence functions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import CohortTable, ModelSpec, build_design_matrix, model_matrix
from .errors import CalibrationError, DataError
from .glm import FitResult, fit_weighted_logistic, influence_functions, sandwich_variance

MAX_ITER = 100
TOL = 1e-10
IMPUTED = "xhat"


@dataclass(frozen=True)
class RakingWeights:
    g: np.ndarray
    weights: np.ndarray
    lam: np.ndarray
    converged: bool
    iterations: int
    residual: np.ndarray


@dataclass(frozen=True)
class RakingResult:
    g: np.ndarray
    weights: np.ndarray
    lam: np.ndarray
    converged: bool
    calibrated_fit: FitResult
    variance: np.ndarray
    rows: np.ndarray
    coef_names: tuple[str, ...] = ()
    variance_phase1: np.ndarray | None = None
    variance_phase2: np.ndarray | None = None

    @property
    def beta_hat(self) -> np.ndarray:
        return self.calibrated_fit.beta_hat

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.variance), 0.0, None))


def _aliased(S: np.ndarray, w: np.ndarray) -> list[int]:
    """Indices of columns lying in the span of the columns before them."""
    Sw = S * np.sqrt(w)[:, None]
    bad, rank = [], 0
    for j in range(S.shape[1]):
        r = np.linalg.matrix_rank(Sw[:, : j + 1])
        if r == rank:
            bad.append(j)
        rank = r
    return bad


def rake(S: np.ndarray, totals: np.ndarray, base_weights: np.ndarray, *,
         names: Sequence[str] | None = None, max_iter: int = MAX_ITER, tol: float = TOL) -> RakingWeights:
    """Poisson-distance calibration.

    Solves ``sum_i w_i exp(S_i' lam) S_i = totals`` by Newton's method on the
    convex dual ``sum_i w_i exp(S_i' lam) - totals' lam`` with step halving.
    Calibrated weights are ``w_i exp(S_i' lam)``; ``g`` is the multiplier.
    """
    S = np.asarray(S, dtype=float)
    T = np.asarray(totals, dtype=float)
    w = np.asarray(base_weights, dtype=float)
    n, q = S.shape
    names = list(names) if names is not None else [f"S{j}" for j in range(q)]
    if q > n:
        raise CalibrationError(f"{q} calibration columns but only {n} sampled rows")
    if np.linalg.matrix_rank(S * np.sqrt(w)[:, None]) < q:
        raise CalibrationError(f"calibration matrix is rank deficient; collinear columns: "
                               f"{', '.join(names[j] for j in _aliased(S, w))}")
    thresh = tol * (1.0 + np.abs(T) + np.abs(w) @ np.abs(S))

    def dual(lam):
        return float(np.sum(w * np.exp(np.minimum(S @ lam, 700.0))) - T @ lam)

    lam = np.zeros(q)
    f = dual(lam)
    for it in range(max_iter + 1):
        gw = w * np.exp(np.minimum(S @ lam, 700.0))
        resid = S.T @ gw - T
        if np.all(np.abs(resid) <= thresh):
            g = gw / w
            return RakingWeights(g, gw, lam, True, it, resid)
        if it == max_iter:
            break
        J = (S * gw[:, None]).T @ S
        try:
            step = np.linalg.solve(J, resid)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-12:
            cand = lam - t * step
            fc = dual(cand)
            if fc <= f + 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            break
        lam, f = cand, fc
    raise CalibrationError("calibration infeasible: Newton iterations did not meet the constraints")


def impute_expensive(table: CohortTable, imputation_spec: ModelSpec) -> np.ndarray:
    """Fitted ``P(X=1 | phase-1 data)`` for every row, from a weighted fit to the phase-2 rows."""
    rows = table.sampled
    if rows.size == 0:
        raise DataError("phase-2 sample is empty")
    Xi, xi = build_design_matrix(table, imputation_spec, rows=rows)
    if len(np.unique(xi)) < 2:
        raise DataError("phase-2 sample contains only one value of the expensive variable")
    alpha = fit_weighted_logistic(Xi, xi, table.weight[rows], allow_separation=True)
    return expit(model_matrix(table, imputation_spec) @ alpha.beta_hat)


def build_plugin_auxiliaries(table: CohortTable, outcome_spec: ModelSpec,
                             imputation_spec: ModelSpec) -> np.ndarray:
    """Influence functions of the outcome model fitted to the whole cohort with imputed X.

    The imputation model is fitted to phase-2 rows with their sampling
    weights; its fitted probability replaces X on every row. Outcome columns
    aliased by the imputation (a constant X-hat, say) are dropped from that
    fit and their influence columns are returned as zeros.
    """
    xhat = impute_expensive(table, imputation_spec)
    imputed = table.with_imputed(IMPUTED, xhat)
    Xo, y = build_design_matrix(imputed, outcome_spec, x_source=IMPUTED)
    keep = np.setdiff1d(np.arange(Xo.shape[1]), _aliased(Xo, np.ones(len(y))))
    fit = fit_weighted_logistic(Xo[:, keep], y)
    h = np.zeros_like(Xo)
    h[:, keep] = influence_functions(fit, Xo[:, keep], y).h
    return h


def raking_estimator(table: CohortTable, outcome_spec: ModelSpec, imputation_spec: ModelSpec,
                     auxiliaries: np.ndarray | None = None) -> RakingResult:
    """Calibrated weighted estimator of the outcome model; no priors are involved.

    The variance has two parts. The phase-1 part is the model variance a
    full-cohort fit would have, estimated from the sampled rows with the
    calibrated weights. The phase-2 part linearizes the calibrated estimator:
    per-unit influence functions are residualized on the calibration variables
    (weighted least squares) and the calibrated-weight residuals enter the
    stratified sampling formula.
    ``auxiliaries`` (N x q) replaces the plug-in influence functions when given.
    """
    if auxiliaries is None:
        aux = build_plugin_auxiliaries(table, outcome_spec, imputation_spec)
        names = ["(count)", *(f"h[{c}]" for c in outcome_spec.coef_names)]
        live = np.flatnonzero(np.any(aux != 0, axis=0))
        aux, names = aux[:, live], [names[0], *(names[j + 1] for j in live)]
    else:
        aux = np.asarray(auxiliaries, dtype=float).reshape(table.n_rows, -1)
        names = ["(count)", *(f"aux{j}" for j in range(aux.shape[1]))]
    S_all = np.column_stack([np.ones(table.n_rows), aux])
    rows = table.sampled
    w = table.weight[rows]
    S = S_all[rows]
    cal = rake(S, S_all.sum(axis=0), w, names=names)

    X, y = build_design_matrix(table, outcome_spec, rows=rows)
    fit = fit_weighted_logistic(X, y, cal.weights)
    u = influence_functions(fit, X, y, np.ones(len(rows))).h
    Sw = S * w[:, None]
    B = np.linalg.solve(Sw.T @ S, Sw.T @ u)
    contrib = cal.weights[:, None] * (u - S @ B)
    V2 = sandwich_variance(contrib, table.stratum[rows], table.stratum_sizes())
    V1 = (u * cal.weights[:, None]).T @ u
    return RakingResult(cal.g, cal.weights, cal.lam, cal.converged, fit, V1 + V2, rows,
                        tuple(outcome_spec.coef_names), V1, V2)
