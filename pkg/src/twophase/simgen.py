"""Synthetic two-phase cohorts with a misclassified surrogate, and paired Monte Carlo design comparisons."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data import CohortTable, ModelSpec, PriorSpec, stratify
from .errors import DesignError, NumericalError, TwoPhaseError
from .multiwave import (
    OPTIMAL,
    SINGLE_BALANCED,
    SINGLE_PROPORTIONAL,
    TWOWAVE_BALANCED,
    TWOWAVE_PRIOR,
    TWOWAVE_PROPORTIONAL,
    DesignConfig,
    Priors,
    run_design,
)

log = logging.getLogger(__name__)

OUTCOME = ModelSpec.from_strings("Y", ["X", "Z1", "Z2"], target="X")
IMPUTATION = ModelSpec.from_strings("X", ["A", "Z1", "Z2"])
STRATA = ("Z2", "A", "Y")
BETA0, BETA2, BETA3 = -2.0, 1.0, 1.0
FRACTIONS = (1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6)
# (mean shift, variance) applied to every coefficient of both models
PRIOR_SETTINGS = {
    1: (-math.sqrt(0.1) / 2, 0.1),
    2: (-math.sqrt(0.1) / 2, 1.0),
    3: (-0.5, 0.1),
    4: (-0.5, 1.0),
}
MAX_EXCLUDED = 0.02

# Wilms' tumour cohort shape: strata are (instit, relaps, study) cells in lexicographic order
NWTS_STRATA = ("instit", "relaps", "study")
NWTS_SIZES = (1257, 1769, 107, 113, 223, 284, 84, 78)
NWTS_OUTCOME = ModelSpec.from_strings(
    "relaps", ["histol", "spline(age,1)", "stage1", "tumdiam", "tumdiam:stage1"], target="histol")
NWTS_IMPUTATION = ModelSpec.from_strings("histol", ["instit", "age3", "stage2", "study", "study:stage2"])
# P(central histology unfavourable | instit, relaps)
_NWTS_HISTOL = {(0, 0): 0.015, (0, 1): 0.08, (1, 0): 0.55, (1, 1): 0.8}
_NWTS_STAGE = {0: (0.45, 0.27, 0.18, 0.10), 1: (0.25, 0.25, 0.28, 0.22)}


@dataclass(frozen=True)
class ScenarioConfig:
    beta1: float = 1.0
    sensitivity: float = 0.8
    specificity: float = 0.8
    N: int = 1000
    n: int = 300
    reps: int = 1000
    exposure_prev: float = 0.15
    fractions: tuple[float, ...] = FRACTIONS
    priors: tuple[int, ...] = (1, 2, 3, 4)
    designs: tuple[str, ...] = (OPTIMAL, SINGLE_PROPORTIONAL, SINGLE_BALANCED,
                                TWOWAVE_PROPORTIONAL, TWOWAVE_BALANCED, TWOWAVE_PRIOR)
    seed: int = 20210
    workers: int = 1

    def __post_init__(self):
        for name in ("sensitivity", "specificity", "exposure_prev"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if any(not 0 < f < 1 for f in self.fractions):
            raise ValueError("wave-1 fractions must lie in (0, 1)")
        if self.reps < 1 or self.N < 2 or self.n < 2:
            raise ValueError("reps, N and n must be positive")
        unknown = set(self.priors) - set(PRIOR_SETTINGS)
        if unknown:
            raise ValueError(f"unknown prior settings {sorted(unknown)}; valid: 1-4")

    @property
    def true_beta(self) -> np.ndarray:
        return np.array([BETA0, self.beta1, BETA2, BETA3])

    @property
    def true_alpha(self) -> np.ndarray:
        """Coefficients of ``logit P(X=1 | A, Z1, Z2)`` implied by the generator.

        X is independent of (Z1, Z2) and A depends on X alone, so only the
        intercept and the A slope are nonzero.
        """
        p, se, sp = self.exposure_prev, self.sensitivity, self.specificity
        p_a0 = p * (1 - se) / (p * (1 - se) + (1 - p) * sp)
        p_a1 = p * se / (p * se + (1 - p) * (1 - sp))
        return np.array([logit(p_a0), logit(p_a1) - logit(p_a0), 0.0, 0.0])

    def prior(self, index: int) -> Priors:
        shift, var = PRIOR_SETTINGS[index]
        return Priors(PriorSpec.shifted(self.true_beta, shift, var),
                      PriorSpec.shifted(self.true_alpha, shift, var))

    def design_configs(self) -> list[DesignConfig]:
        out = []
        for kind in self.designs:
            if kind == TWOWAVE_PRIOR:
                out += [DesignConfig(kind, f, self.prior(k), label=f"prior{k}")
                        for k in self.priors for f in self.fractions]
            elif kind in (TWOWAVE_PROPORTIONAL, TWOWAVE_BALANCED):
                out += [DesignConfig(kind, f) for f in self.fractions]
            else:
                out.append(DesignConfig(kind))
        return out


@dataclass(frozen=True)
class MetricRow:
    design_kind: str
    fraction: float | None
    mse_times_10: float
    ere: float
    reps_used: int
    mc_se: float
    excluded: int = 0
    var: float = field(default=float("nan"), repr=False)

    def record(self) -> dict:
        return {
            "design": self.design_kind,
            "fraction": "" if self.fraction is None else _fraction_label(self.fraction),
            "mse_x10": f"{self.mse_times_10:.2f}",
            "ere": "NA" if not np.isfinite(self.ere) else f"{self.ere:.2f}",
            "reps_used": self.reps_used,
            "excluded": self.excluded,
            "mc_se": "NA" if not np.isfinite(self.mc_se) else f"{self.mc_se:.4g}",
        }


def _fraction_label(f: float) -> str:
    k = round(f * 6)
    return f"{k}/6" if abs(k / 6 - f) < 1e-9 else f"{f:g}"


def seed_sequence(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


def generate_cohort(config: ScenarioConfig, rep_index: int) -> tuple[CohortTable, np.ndarray]:
    """Phase-1 cohort for one replicate plus the hidden true X.

    X ~ Bern(prev); A misclassifies X with the given sensitivity and
    specificity; Z1 ~ U(0,1); Z2 ~ Bern(0.6); Y from the logistic outcome
    model. Strata cross-classify (Z2, A, Y).
    """
    rng = np.random.default_rng(seed_sequence(config.seed, rep_index, 0))
    N = config.N
    x = (rng.random(N) < config.exposure_prev).astype(float)
    u = rng.random(N)
    a = np.where(x == 1, u < config.sensitivity, u >= config.specificity).astype(float)
    z1 = rng.random(N)
    z2 = (rng.random(N) < 0.6).astype(float)
    eta = BETA0 + config.beta1 * x + BETA2 * z1 + BETA3 * z2
    y = (rng.random(N) < expit(eta)).astype(float)
    columns = {"Y": y, "Z1": z1, "Z2": z2, "A": a}
    labels, _ = stratify(columns, STRATA)
    table = CohortTable.phase1(columns, "Y", "X", labels, ("Z1", "Z2"), ("A",))
    return table, x


def nwts_like_cohort(seed: int = 0) -> tuple[CohortTable, np.ndarray]:
    """A 3915-row cohort with the Wilms' tumour strata sizes and relapse-linked covariates.

    Central histology (the expensive ``histol``) is a noisy copy of ``instit``;
    stage, age and tumour diameter shift upward among relapses.
    """
    rng = np.random.default_rng(seed)
    cells = [(i, r, st) for i in (0, 1) for r in (0, 1) for st in (3, 4)]
    instit, relaps, study = (np.repeat([c[k] for c in cells], NWTS_SIZES).astype(float) for k in range(3))
    N = len(instit)
    p_hist = np.array([_NWTS_HISTOL[(int(i), int(r))] for i, r in zip(instit, relaps)])
    histol = (rng.random(N) < p_hist).astype(float)
    stage = np.array([rng.choice(4, p=_NWTS_STAGE[int(r)]) + 1 for r in relaps], dtype=float)
    age = rng.gamma(2.0, 1.6, N) + 0.6 * relaps
    tumdiam = np.clip(rng.normal(11.0 + 1.5 * relaps, 3.5), 1.0, None)
    columns = {"relaps": relaps, "instit": instit, "study": study, "age": age, "tumdiam": tumdiam,
               "stage1": (stage >= 3).astype(float), "stage2": (stage == 4).astype(float),
               "age3": (age > 10).astype(float)}
    labels, _ = stratify(columns, NWTS_STRATA)
    table = CohortTable.phase1(columns, "relaps", "histol", labels,
                               ("age", "tumdiam", "stage1", "stage2", "age3"), NWTS_STRATA)
    return table, histol


def run_replicate(config: ScenarioConfig, rep_index: int,
                  designs: Sequence[DesignConfig] | None = None) -> list[float | None]:
    """``beta1`` estimates for every design on one shared cohort; ``None`` marks a failure."""
    designs = config.design_configs() if designs is None else designs
    table, x = generate_cohort(config, rep_index)
    out = []
    for d, cfg in enumerate(designs):
        seed = int(seed_sequence(config.seed, rep_index, 1, d).generate_state(1)[0])
        try:
            run = run_design(table, cfg, config.n, seed, x, OUTCOME, IMPUTATION)
            out.append(float(run.final_estimate.beta_hat[OUTCOME.target_index()]))
        except (NumericalError, DesignError, TwoPhaseError) as exc:
            log.info("rep %d design %s failed: %s", rep_index, cfg.name, exc)
            out.append(None)
    return out


def _replicate_task(args):
    config, rep = args
    return rep, run_replicate(config, rep)


def simulate(config: ScenarioConfig) -> np.ndarray:
    """``reps x designs`` matrix of ``beta1`` estimates (NaN for failed runs)."""
    designs = config.design_configs()
    est = np.full((config.reps, len(designs)), np.nan)
    tasks = [(config, r) for r in range(config.reps)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=4))
    else:
        results = [_replicate_task(t) for t in tasks]
    for rep, vals in sorted(results, key=lambda r: r[0]):
        est[rep] = [np.nan if v is None else v for v in vals]
    return est


def summarize_estimates(config: ScenarioConfig, est: np.ndarray,
                        designs: Sequence[DesignConfig] | None = None) -> list[MetricRow]:
    """MSE and ERE per design; ERE uses replicates where both the design and the optimum succeeded."""
    designs = config.design_configs() if designs is None else designs
    names = [d.kind for d in designs]
    opt = names.index(OPTIMAL) if OPTIMAL in names else None
    reps = est.shape[0]
    rows = []
    for j, cfg in enumerate(designs):
        col = est[:, j]
        ok = np.isfinite(col)
        excluded = int(reps - ok.sum())
        if excluded > MAX_EXCLUDED * reps:
            raise DesignError(f"{cfg.name} failed on {excluded} of {reps} replicates (> 2%)")
        sq = (col[ok] - config.beta1) ** 2
        mse = float(sq.mean())
        mc_se = float(sq.std(ddof=1) / np.sqrt(ok.sum())) if ok.sum() > 1 else float("nan")
        var = float(np.var(col[ok], ddof=1)) if ok.sum() > 1 else float("nan")
        ere = float("nan")
        if opt is not None:
            both = ok & np.isfinite(est[:, opt])
            if both.sum() > 1 and np.var(col[both]) > 0:
                ere = float(np.var(est[both, opt], ddof=1) / np.var(col[both], ddof=1))
        rows.append(MetricRow(cfg.name, cfg.fraction, 10 * mse, ere, int(ok.sum()), mc_se, excluded, var))
    return rows


def run_scenario(config: ScenarioConfig) -> list[MetricRow]:
    """Run every configured design on ``reps`` shared cohorts and aggregate MSE and ERE."""
    return summarize_estimates(config, simulate(config))
