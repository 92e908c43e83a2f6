"""Two-wave adaptive designs: prior-informed wave 1, adaptive wave 2, raking analysis.

Design-stage influence functions are computed analytically for binary X:
each unsampled row contributes the two-point mixture of ``h(X=0)`` and
``h(X=1)`` under ``P(X=1 | phase-1 data)``, and per-stratum variances follow
from the law of total variance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .allocation import (
    Allocation,
    balanced_allocation,
    exact_integer_allocation,
    proportional_allocation,
    wave2_allocation,
)
from .data import CohortTable, ModelSpec, PriorSpec, build_design_matrix, model_matrix, summarize
from .errors import DesignError
from .glm import fit_weighted_logistic, influence_functions
from .raking import RakingResult, raking_estimator

log = logging.getLogger(__name__)

SINGLE_PROPORTIONAL = "single-proportional"
SINGLE_BALANCED = "single-balanced"
OPTIMAL = "optimal-full-data"
TWOWAVE_PROPORTIONAL = "twowave-proportional"
TWOWAVE_BALANCED = "twowave-balanced"
TWOWAVE_PRIOR = "twowave-prior"
DESIGN_KINDS = (SINGLE_PROPORTIONAL, SINGLE_BALANCED, OPTIMAL,
                TWOWAVE_PROPORTIONAL, TWOWAVE_BALANCED, TWOWAVE_PRIOR)
TWO_WAVE = (TWOWAVE_PROPORTIONAL, TWOWAVE_BALANCED, TWOWAVE_PRIOR)


@dataclass(frozen=True)
class Priors:
    outcome: PriorSpec
    imputation: PriorSpec

    def check(self, outcome_spec: ModelSpec, imputation_spec: ModelSpec) -> None:
        self.outcome.check_width(outcome_spec.width)
        self.imputation.check_width(imputation_spec.width)
        if not (self.outcome.is_informative and self.imputation.is_informative):
            raise DesignError("prior-informed design needs finite prior variances on every coefficient")


@dataclass(frozen=True)
class DesignConfig:
    kind: str
    fraction: float | None = None
    priors: Priors | None = None
    floor: int = 2
    label: str | None = None

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise DesignError(f"unknown design {self.kind!r}; valid kinds: {', '.join(DESIGN_KINDS)}")
        two_wave = self.kind in TWO_WAVE
        if two_wave != (self.fraction is not None):
            raise DesignError(f"{self.kind}: wave-1 fraction is required for two-wave designs only")
        if two_wave and not 0 < self.fraction < 1:
            raise DesignError(f"wave-1 fraction must lie in (0, 1), got {self.fraction}")
        if (self.kind == TWOWAVE_PRIOR) != (self.priors is not None):
            raise DesignError("priors are required for, and only for, twowave-prior")

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass(frozen=True)
class WavePlan:
    wave_index: int
    allocation: Allocation
    realized: np.ndarray
    rng_seed: int
    fraction: float | None = None
    sd: np.ndarray | None = None
    fallback_strata: tuple[int, ...] = ()

    def record(self) -> dict:
        return {
            "wave": self.wave_index,
            "fraction": self.fraction,
            "allocation": self.allocation.as_list(),
            "realized": [int(v) for v in self.realized],
            "sd": None if self.sd is None else [float(v) for v in self.sd],
            "fallback_strata": list(self.fallback_strata),
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True)
class DesignRun:
    config: DesignConfig
    waves: tuple[WavePlan, ...]
    final_estimate: RakingResult
    sampled_rows: np.ndarray = field(repr=False)
    table: CohortTable = field(repr=False)

    @property
    def design_kind(self) -> str:
        return self.config.kind

    @property
    def n_h(self) -> np.ndarray:
        return sum(w.realized for w in self.waves)


# -- design-stage influence functions ---------------------------------------

def _two_point_designs(table: CohortTable, outcome_spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    zeros = table.with_imputed("x=0", np.zeros(table.n_rows)).with_imputed("x=1", np.ones(table.n_rows))
    return model_matrix(zeros, outcome_spec, "x=0"), model_matrix(zeros, outcome_spec, "x=1")


def posterior_x(table: CohortTable, outcome_spec: ModelSpec, imputation_spec: ModelSpec,
                beta: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``P(X=1 | A, Z, Y)`` per row: the imputation model reweighted by the outcome likelihood.

    Rows with X observed get their observed value.
    """
    X0, X1 = _two_point_designs(table, outcome_spec)
    y = table.y
    prior1 = expit(model_matrix(table, imputation_spec) @ alpha)
    mu0, mu1 = expit(X0 @ beta), expit(X1 @ beta)
    lik0 = np.where(y == 1, mu0, 1.0 - mu0)
    lik1 = np.where(y == 1, mu1, 1.0 - mu1)
    num = prior1 * lik1
    p = num / (num + (1.0 - prior1) * lik0)
    return np.where(table.phase2, np.nan_to_num(table.x), p)


def expected_stratum_sd(table: CohortTable, outcome_spec: ModelSpec, beta: np.ndarray,
                        p1: np.ndarray, target: int) -> np.ndarray:
    """Per-stratum sd of the target influence function with X integrated out.

    The information is the expected full-cohort information at ``beta``
    (every row, unit weight), so ``h`` is defined for unsampled rows too.
    """
    X0, X1 = _two_point_designs(table, outcome_spec)
    y = table.y
    mu0, mu1 = expit(X0 @ beta), expit(X1 @ beta)
    info = ((X0 * ((1 - p1) * mu0 * (1 - mu0))[:, None]).T @ X0
            + (X1 * (p1 * mu1 * (1 - mu1))[:, None]).T @ X1)
    c = np.linalg.solve(info, np.eye(len(beta))[target])
    h0 = (y - mu0) * (X0 @ c)
    h1 = (y - mu1) * (X1 @ c)
    mean = p1 * h1 + (1 - p1) * h0
    within = p1 * (1 - p1) * (h1 - h0) ** 2
    H = table.n_strata
    sd = np.empty(H)
    for h in range(H):
        m = table.stratum == h
        between = np.var(mean[m], ddof=1) if m.sum() > 1 else 0.0
        sd[h] = np.sqrt(between + within[m].mean())
    return sd


def full_data_sd(table: CohortTable, outcome_spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    """Per-stratum sd of the target influence function when X is known for everyone."""
    full = table.with_imputed("x=true", x)
    X, y = build_design_matrix(full, outcome_spec, x_source="x=true")
    fit = fit_weighted_logistic(X, y)
    h = influence_functions(fit, X, y, target_column=outcome_spec.target_index(table.expensive)).target
    return np.array([np.std(h[table.stratum == s], ddof=1) for s in range(table.n_strata)])


def prior_stratum_sd(table: CohortTable, outcome_spec: ModelSpec, imputation_spec: ModelSpec,
                     priors: Priors) -> np.ndarray:
    priors.check(outcome_spec, imputation_spec)
    beta, alpha = priors.outcome.mean, priors.imputation.mean
    p1 = posterior_x(table, outcome_spec, imputation_spec, beta, alpha)
    return expected_stratum_sd(table, outcome_spec, beta, p1, outcome_spec.target_index(table.expensive))


def prior_wave1_design(table: CohortTable, outcome_spec: ModelSpec, imputation_spec: ModelSpec,
                       priors: Priors, n_a: int, floor: int = 2) -> Allocation:
    """Wave-1 allocation from priors and phase-1 data alone.

    Before any X is measured the posterior of each coefficient vector is its
    prior, so influence functions are evaluated at the prior means.
    """
    sd = prior_stratum_sd(table, outcome_spec, imputation_spec, priors)
    return exact_integer_allocation(summarize(table.stratum, sd), n_a, floor)


def wave1_analysis(table: CohortTable, outcome_spec: ModelSpec, imputation_spec: ModelSpec,
                   priors: Priors | None = None, fallback_sd: np.ndarray | None = None
                   ) -> tuple[np.ndarray, tuple[int, ...]]:
    """Updated per-stratum sd after wave 1.

    With priors, both models are refitted on the wave-1 rows with sampling
    weights by MAP and expected influence functions are recomputed over the
    whole cohort. Without priors, the sd comes from the wave-1 rows alone
    (see ``sampled_stratum_sd``). Returns the sd vector and the strata whose
    sd fell back to ``fallback_sd`` because wave 1 left them uninformative.
    """
    if priors is None:
        sd = sampled_stratum_sd(table, outcome_spec)
        return _with_fallback(sd, fallback_sd)
    priors.check(outcome_spec, imputation_spec)
    rows = table.sampled
    w = table.weight[rows]
    Xi, xi = build_design_matrix(table, imputation_spec, rows=rows)
    Xo, y = build_design_matrix(table, outcome_spec, rows=rows)
    alpha = fit_weighted_logistic(Xi, xi, w, priors.imputation, allow_separation=True)
    beta = fit_weighted_logistic(Xo, y, w, priors.outcome, allow_separation=True)
    for name, fit in (("imputation", alpha), ("outcome", beta)):
        if not fit.converged:
            log.debug("wave-1 %s fit saturated (separation); using the capped iterate", name)
    p1 = posterior_x(table, outcome_spec, imputation_spec, beta.beta_hat, alpha.beta_hat)
    sd = expected_stratum_sd(table, outcome_spec, beta.beta_hat, p1,
                             outcome_spec.target_index(table.expensive))
    return _with_fallback(sd, fallback_sd)


def _with_fallback(sd: np.ndarray, fallback_sd: np.ndarray | None) -> tuple[np.ndarray, tuple[int, ...]]:
    bad = tuple(int(h) for h in np.flatnonzero(~np.isfinite(sd) | (sd <= 0)))
    if bad:
        mask = np.isin(np.arange(len(sd)), bad)
        sd = np.where(mask, 0.0 if fallback_sd is None else fallback_sd, sd)
        log.warning("wave-1 sd uninformative in strata %s; using fallback", bad)
    return sd, bad


def sampled_stratum_sd(table: CohortTable, outcome_spec: ModelSpec) -> np.ndarray:
    """Per-stratum sd of the target influence function over the sampled rows only.

    This is the estimate available to a pre-specified wave 1 without priors:
    the outcome model is fitted to the sampled rows with their weights and
    the sd is taken over the handful of measured rows in each stratum.
    """
    rows = table.sampled
    X, y = build_design_matrix(table, outcome_spec, rows=rows)
    fit = fit_weighted_logistic(X, y, table.weight[rows], allow_separation=True)
    if not fit.converged:
        log.debug("wave-1 outcome fit saturated (separation); using the capped iterate")
    u = influence_functions(fit, X, y, target_column=outcome_spec.target_index(table.expensive)).target
    labels = table.stratum[rows]
    return np.array([np.std(u[labels == h], ddof=1) if np.sum(labels == h) > 1 else np.nan
                     for h in range(table.n_strata)])


# -- sampling -----------------------------------------------------------------

def draw_stratified_sample(table: CohortTable, counts: Sequence[int], rng: np.random.Generator,
                           exclude: np.ndarray | None = None) -> np.ndarray:
    """Simple random sampling without replacement within each stratum; sorted row ids."""
    taken = np.zeros(table.n_rows, bool)
    if exclude is not None:
        taken[exclude] = True
    out = []
    for h, k in enumerate(counts):
        if k == 0:
            continue
        avail = np.flatnonzero((table.stratum == h) & ~taken)
        if k > len(avail):
            raise DesignError(f"stratum {h}: allocation {k} exceeds {len(avail)} available rows")
        out.append(rng.choice(avail, size=int(k), replace=False))
    return np.sort(np.concatenate(out)) if out else np.empty(0, np.int64)


def measure(table: CohortTable, rows: np.ndarray, x: np.ndarray) -> CohortTable:
    """Phase-2 table for ``rows`` with combined-wave weights ``N_h / n_h``."""
    n_h = np.bincount(table.stratum[rows], minlength=table.n_strata)
    N_h = table.stratum_sizes()
    with np.errstate(divide="ignore"):
        weight = (N_h / n_h)[table.stratum]
    return table.with_phase2(rows, x[rows], weight)


# -- end to end ---------------------------------------------------------------

def _wave1_allocation(table, cfg: DesignConfig, n_a, outcome_spec, imputation_spec):
    N_h = table.stratum_sizes()
    if cfg.kind in (SINGLE_PROPORTIONAL, TWOWAVE_PROPORTIONAL):
        return proportional_allocation(N_h, n_a, cfg.floor), None
    if cfg.kind in (SINGLE_BALANCED, TWOWAVE_BALANCED):
        return balanced_allocation(N_h, n_a, cfg.floor), None
    sd = prior_stratum_sd(table, outcome_spec, imputation_spec, cfg.priors)
    return exact_integer_allocation(summarize(table.stratum, sd), n_a, cfg.floor), sd


def run_design(table: CohortTable, config: DesignConfig, n: int, seed: int,
               x: np.ndarray, outcome_spec: ModelSpec, imputation_spec: ModelSpec) -> DesignRun:
    """Execute one design end to end and analyse the final sample by raking.

    ``x`` is the measurement source for the expensive variable; entries are
    read only for sampled rows, except by the full-data optimal design.
    """
    if table.phase2.any():
        raise DesignError("design must start from a phase-1 table with nothing sampled")
    H = table.n_strata
    if n < config.floor * H:
        raise DesignError(f"floor infeasible: n = {n} < {config.floor} x {H} strata")
    rng = np.random.default_rng(seed)
    waves = []

    if config.kind == OPTIMAL:
        if not np.all(np.isfinite(x)):
            raise DesignError("optimal-full-data design needs X on every row")
        sd = full_data_sd(table, outcome_spec, x)
        alloc = exact_integer_allocation(summarize(table.stratum, sd), n, config.floor)
        rows = draw_stratified_sample(table, alloc.n_h, rng)
        waves.append(WavePlan(1, alloc, alloc.n_h, seed, None, sd))
    elif config.kind in (SINGLE_PROPORTIONAL, SINGLE_BALANCED):
        alloc, _ = _wave1_allocation(table, config, n, outcome_spec, imputation_spec)
        rows = draw_stratified_sample(table, alloc.n_h, rng)
        waves.append(WavePlan(1, alloc, alloc.n_h, seed))
    else:
        n_a = int(round(config.fraction * n))
        alloc1, sd0 = _wave1_allocation(table, config, n_a, outcome_spec, imputation_spec)
        rows1 = draw_stratified_sample(table, alloc1.n_h, rng)
        waves.append(WavePlan(1, alloc1, alloc1.n_h, seed, config.fraction, sd0))
        wave1 = measure(table, rows1, x)
        sd, bad = wave1_analysis(wave1, outcome_spec, imputation_spec, config.priors, sd0)
        summaries = summarize(table.stratum, sd)
        extra = wave2_allocation(summaries, n, alloc1.n_h)
        alloc2 = Allocation(extra, float("nan"), np.zeros(H, np.int64), table.stratum_sizes() - alloc1.n_h)
        rows2 = draw_stratified_sample(table, extra, rng, exclude=rows1)
        waves.append(WavePlan(2, alloc2, extra, seed, 1 - config.fraction, sd, bad))
        rows = np.sort(np.concatenate([rows1, rows2]))
        if len(np.unique(rows)) != len(rows):
            raise DesignError("a row was sampled in both waves")

    final = measure(table, rows, x)
    if final.sampled_counts().min() < 2:
        raise DesignError("a stratum has fewer than 2 phase-2 rows at analysis")
    estimate = raking_estimator(final, outcome_spec, imputation_spec)
    return DesignRun(config, tuple(waves), estimate, rows, final)
