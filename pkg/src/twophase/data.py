"""Cohort data model: the phase-1 table, its strata, and the phase-2 sampling state."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError

OBSERVED = "observed"


@dataclass(frozen=True)
class StratumSummary:
    stratum_id: int
    N_h: int
    n_h: int = 0
    sd_h: float = 0.0
    cell: tuple = ()

    def __post_init__(self):
        if not 0 <= self.n_h <= self.N_h:
            raise DataError(f"stratum {self.stratum_id}: n_h={self.n_h} outside [0, {self.N_h}]")
        if not self.sd_h >= 0:
            raise DataError(f"stratum {self.stratum_id}: sd_h must be nonnegative, got {self.sd_h}")


@dataclass(frozen=True)
class Term:
    """One design-matrix term.

    ``kind`` is ``"main"`` (one column), ``"interaction"`` (elementwise product
    of two columns) or ``"spline"`` (the pair ``min(a, k)``, ``max(a - k, 0)``).
    """

    kind: str
    columns: tuple[str, ...]
    knot: float | None = None

    _SPLINE = re.compile(r"^spline\(\s*([^,\s]+)\s*,\s*([-+0-9.eE]+)\s*\)$")

    @classmethod
    def parse(cls, text: str) -> "Term":
        text = text.strip()
        m = cls._SPLINE.match(text)
        if m:
            return cls("spline", (m.group(1),), float(m.group(2)))
        if ":" in text:
            a, b = (s.strip() for s in text.split(":"))
            return cls("interaction", (a, b))
        return cls("main", (text,))

    @property
    def names(self) -> list[str]:
        if self.kind == "main":
            return [self.columns[0]]
        if self.kind == "interaction":
            return [f"{self.columns[0]}:{self.columns[1]}"]
        col, k = self.columns[0], _fmt(self.knot)
        return [f"min({col},{k})", f"max({col}-{k},0)"]

    def evaluate(self, lookup) -> list[np.ndarray]:
        if self.kind == "main":
            return [lookup(self.columns[0])]
        if self.kind == "interaction":
            return [lookup(self.columns[0]) * lookup(self.columns[1])]
        if self.kind == "spline":
            a = lookup(self.columns[0])
            return [np.minimum(a, self.knot), np.maximum(a - self.knot, 0.0)]
        raise DataError(f"unknown term kind {self.kind!r}")


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class ModelSpec:
    """Logistic model structure: response column, ordered terms, coefficient of interest."""

    response: str
    terms: tuple[Term, ...] = ()
    intercept: bool = True
    target: str | None = None
    family: str = "logistic"

    @classmethod
    def from_strings(cls, response: str, terms: Sequence[str], target: str | None = None,
                     intercept: bool = True) -> "ModelSpec":
        return cls(response, tuple(Term.parse(t) for t in terms), intercept, target)

    @property
    def coef_names(self) -> list[str]:
        names = ["(Intercept)"] if self.intercept else []
        for t in self.terms:
            names.extend(t.names)
        return names

    @property
    def width(self) -> int:
        return len(self.coef_names)

    @property
    def referenced_columns(self) -> set[str]:
        return {c for t in self.terms for c in t.columns}

    def target_index(self, default: str | None = None) -> int:
        name = self.target or default
        if name is None:
            raise DataError("model has no target coefficient")
        try:
            return self.coef_names.index(name)
        except ValueError:
            raise DataError(f"target coefficient {name!r} not among {self.coef_names}") from None


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal priors, one per coefficient; ``inf`` variance means flat."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        var = np.asarray(self.variance, dtype=float)
        if mean.shape != var.shape or mean.ndim != 1:
            raise DataError("prior mean and variance must be 1-d vectors of equal length")
        if np.any(~(var > 0)):
            raise DataError("prior variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @classmethod
    def flat(cls, p: int) -> "PriorSpec":
        return cls(np.zeros(p), np.full(p, np.inf))

    @classmethod
    def shifted(cls, truth: Sequence[float], shift: float, variance: float) -> "PriorSpec":
        """Prior ``N(truth + shift, variance)`` on every coefficient."""
        truth = np.asarray(truth, dtype=float)
        return cls(truth + shift, np.full(truth.shape, float(variance)))

    def __len__(self) -> int:
        return len(self.mean)

    @property
    def is_flat(self) -> bool:
        return bool(np.all(np.isinf(self.variance)))

    @property
    def is_informative(self) -> bool:
        return bool(np.all(np.isfinite(self.variance)))

    def check_width(self, p: int) -> None:
        if len(self) != p:
            raise DataError(f"prior has {len(self)} coefficients, model has {p}")


@dataclass(frozen=True)
class CohortTable:
    """Phase-1 cohort with phase-2 sampling state.

    ``x`` holds the expensive variable where observed and NaN elsewhere;
    ``weight`` holds ``1/pi`` for sampled rows and NaN for the rest.
    Imputed copies of X live in ``imputed`` and never touch ``x``.
    """

    columns: Mapping[str, np.ndarray]
    outcome: str
    expensive: str
    stratum: np.ndarray
    phase2: np.ndarray
    x: np.ndarray
    weight: np.ndarray
    covariates: tuple[str, ...] = ()
    auxiliaries: tuple[str, ...] = ()
    imputed: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        cols = {k: _frozen(np.asarray(v, dtype=float)) for k, v in self.columns.items()}
        n = len(self.stratum)
        for k, v in cols.items():
            if v.shape != (n,):
                raise DataError(f"column {k!r} has shape {v.shape}, expected ({n},)")
        if self.outcome not in cols:
            raise DataError(f"outcome column {self.outcome!r} missing")
        if self.expensive in cols:
            raise DataError(f"expensive variable {self.expensive!r} must not be a phase-1 column")
        y = cols[self.outcome]
        if not np.all((y == 0) | (y == 1)):
            raise DataError("outcome must be binary 0/1")
        stratum = _frozen(np.asarray(self.stratum, dtype=np.int64))
        H = int(stratum.max()) + 1 if n else 0
        if n and (stratum.min() < 0 or len(np.unique(stratum)) != H):
            raise DataError("stratum labels must cover 0..H-1 with every label occupied")
        r = _frozen(np.asarray(self.phase2, dtype=bool))
        x = _frozen(np.asarray(self.x, dtype=float))
        w = _frozen(np.asarray(self.weight, dtype=float))
        if not np.array_equal(np.isfinite(x), r):
            raise DataError("X must be observed exactly on phase-2 rows")
        if np.any(np.isfinite(w) != r):
            raise DataError("weights must be defined exactly on phase-2 rows")
        if np.any(w[r] < 1 - 1e-12):
            raise DataError("sampling weights 1/pi must be >= 1")
        imputed = {k: _frozen(np.asarray(v, dtype=float)) for k, v in self.imputed.items()}
        for k in (*self.covariates, *self.auxiliaries):
            if k not in cols:
                raise DataError(f"column {k!r} missing")
        object.__setattr__(self, "columns", MappingProxyType(cols))
        object.__setattr__(self, "stratum", stratum)
        object.__setattr__(self, "phase2", r)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "imputed", MappingProxyType(imputed))

    @classmethod
    def phase1(cls, columns: Mapping[str, np.ndarray], outcome: str, expensive: str,
               stratum: np.ndarray | None = None, covariates: Sequence[str] = (),
               auxiliaries: Sequence[str] = ()) -> "CohortTable":
        n = len(next(iter(columns.values())))
        if stratum is None:
            stratum = np.zeros(n, dtype=np.int64)
        return cls(columns, outcome, expensive, stratum, np.zeros(n, bool),
                   np.full(n, np.nan), np.full(n, np.nan), tuple(covariates), tuple(auxiliaries))

    @property
    def n_rows(self) -> int:
        return len(self.stratum)

    @property
    def n_strata(self) -> int:
        return int(self.stratum.max()) + 1

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.outcome]

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.phase2)

    def stratum_sizes(self) -> np.ndarray:
        return np.bincount(self.stratum, minlength=self.n_strata)

    def sampled_counts(self) -> np.ndarray:
        return np.bincount(self.stratum[self.phase2], minlength=self.n_strata)

    def column(self, name: str, x_source: str = OBSERVED) -> np.ndarray:
        if name == self.expensive:
            return self.x if x_source == OBSERVED else self.imputed_column(x_source)
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"column {name!r} missing") from None

    def imputed_column(self, name: str) -> np.ndarray:
        try:
            return self.imputed[name]
        except KeyError:
            raise DataError(f"imputed column {name!r} missing") from None

    def with_strata(self, labels: np.ndarray) -> "CohortTable":
        return replace(self, stratum=labels)

    def with_phase2(self, rows: np.ndarray, x_values: np.ndarray, weight: np.ndarray) -> "CohortTable":
        """Return a copy whose phase-2 sample is exactly ``rows``.

        ``weight`` is a full-length vector; only entries at ``rows`` are kept.
        """
        rows = np.asarray(rows, dtype=np.int64)
        r = np.zeros(self.n_rows, bool)
        r[rows] = True
        x = np.full(self.n_rows, np.nan)
        x[rows] = np.asarray(x_values, dtype=float)
        w = np.full(self.n_rows, np.nan)
        w[rows] = np.asarray(weight, dtype=float)[rows]
        return replace(self, phase2=r, x=x, weight=w)

    def with_imputed(self, name: str, values: np.ndarray) -> "CohortTable":
        imputed = dict(self.imputed)
        imputed[name] = values
        return replace(self, imputed=imputed)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def design_matrix(spec: ModelSpec, lookup, n: int) -> np.ndarray:
    """Assemble the design matrix from a ``name -> column`` lookup."""
    cols = [np.ones(n)] if spec.intercept else []
    for term in spec.terms:
        cols.extend(np.asarray(c, dtype=float) for c in term.evaluate(lookup))
    if not cols:
        raise DataError("model has no columns")
    return np.column_stack(cols)


def _lookup(table: CohortTable, x_source: str, idx: np.ndarray):
    def lookup(name):
        col = table.column(name, x_source)[idx]
        if name == table.expensive and not np.all(np.isfinite(col)):
            raise DataError(f"{name!r} from source {x_source!r} is missing on requested rows")
        return col
    return lookup


def model_matrix(table: CohortTable, spec: ModelSpec, x_source: str = OBSERVED,
                 rows: np.ndarray | None = None) -> np.ndarray:
    """Design matrix alone; the response need not be available on ``rows``."""
    idx = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    return design_matrix(spec, _lookup(table, x_source, idx), len(idx))


def build_design_matrix(table: CohortTable, spec: ModelSpec, x_source: str = OBSERVED,
                        rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix and response for ``rows`` (default: all rows).

    Intercept first, then each term's columns in spec order. Rank is not checked.
    """
    idx = np.arange(table.n_rows) if rows is None else np.asarray(rows, dtype=np.int64)
    lookup = _lookup(table, x_source, idx)
    return design_matrix(spec, lookup, len(idx)), lookup(spec.response)


def stratify(columns: Mapping[str, np.ndarray], names: Sequence[str],
             max_levels: int = 50) -> tuple[np.ndarray, list[StratumSummary]]:
    """Cross-classify discrete columns into strata labelled in lexicographic cell order.

    Empty cells are dropped, so labels are always 0..H-1 with every label occupied.
    """
    if not names:
        n = len(next(iter(columns.values())))
        return np.zeros(n, np.int64), [StratumSummary(0, n)]
    codes, levels = [], []
    for name in names:
        try:
            v = np.asarray(columns[name], dtype=float)
        except KeyError:
            raise DataError(f"stratification column {name!r} missing") from None
        if not np.all(np.isfinite(v)) or np.any(v != np.round(v)):
            raise DataError(f"stratification column {name!r} is not discrete")
        lv, code = np.unique(v, return_inverse=True)
        if len(lv) > max_levels:
            raise DataError(f"stratification column {name!r} has {len(lv)} levels; looks continuous")
        codes.append(code)
        levels.append(lv)
    shape = tuple(len(lv) for lv in levels)
    flat = np.ravel_multi_index(codes, shape)
    occupied, labels = np.unique(flat, return_inverse=True)
    counts = np.bincount(labels)
    summaries = []
    for h, cell in enumerate(occupied):
        key = tuple(lv[i].item() for lv, i in zip(levels, np.unravel_index(cell, shape)))
        summaries.append(StratumSummary(h, int(counts[h]), cell=key))
    return labels.astype(np.int64), summaries


def summarize(labels: np.ndarray, sd: Sequence[float] | None = None,
              sampled: np.ndarray | None = None) -> list[StratumSummary]:
    H = int(labels.max()) + 1
    N = np.bincount(labels, minlength=H)
    n = np.zeros(H, int) if sampled is None else np.bincount(labels[sampled], minlength=H)
    sd = np.zeros(H) if sd is None else np.asarray(sd, dtype=float)
    return [StratumSummary(h, int(N[h]), int(n[h]), float(sd[h])) for h in range(H)]


def cohort_from_columns(columns: Mapping[str, Sequence[float | None]], outcome: str, expensive: str,
                        strata: Sequence[str], covariates: Sequence[str] = (),
                        auxiliaries: Sequence[str] = ()) -> tuple[CohortTable, np.ndarray]:
    """Phase-1 table from named columns plus the expensive variable (NaN where unknown)."""
    if expensive not in columns:
        raise DataError(f"expensive column {expensive!r} missing")
    x = np.array([np.nan if v is None else v for v in columns[expensive]], dtype=float)
    phase1 = {}
    for name, values in columns.items():
        if name == expensive:
            continue
        col = np.array([np.nan if v is None else v for v in values], dtype=float)
        if len(col) != len(x):
            raise DataError(f"column {name!r} has {len(col)} rows, expected {len(x)}")
        if not np.all(np.isfinite(col)):
            raise DataError(f"column {name!r} has missing or non-numeric values")
        phase1[name] = col
    for name in (outcome, *strata, *covariates, *auxiliaries):
        if name not in phase1:
            raise DataError(f"column {name!r} missing")
    labels, _ = stratify(phase1, strata)
    table = CohortTable.phase1(phase1, outcome, expensive, labels, covariates, auxiliaries)
    return table, x


def read_columns(path: str | Path) -> dict[str, list[float | None]]:
    """Numeric columns of a CSV file; empty or non-numeric fields become None."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = {}
    for name in frame.columns:
        col = pd.to_numeric(frame[name], errors="coerce").astype(float)
        out[str(name)] = [None if np.isnan(v) else float(v) for v in col]
    return out


def load_cohort(path: str | Path, outcome: str, expensive: str, strata: Sequence[str],
                covariates: Sequence[str] = (), auxiliaries: Sequence[str] = ()
                ) -> tuple[CohortTable, np.ndarray]:
    """Read a cohort CSV.

    Returns the phase-1 table (nothing sampled yet) and the expensive variable
    as a separate vector, NaN where the field was empty.
    """
    return cohort_from_columns(read_columns(path), outcome, expensive, strata, covariates, auxiliaries)
