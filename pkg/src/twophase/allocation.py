"""Neyman allocation: the continuous formula and the exact integer optimum under box constraints."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import StratumSummary
from .errors import AllocationError

DEFAULT_FLOOR = 2


@dataclass(frozen=True)
class Allocation:
    n_h: np.ndarray
    objective: float
    floor: np.ndarray
    ceiling: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n_h", np.asarray(self.n_h, dtype=np.int64))

    @property
    def n(self) -> int:
        return int(self.n_h.sum())

    def as_list(self) -> list[int]:
        return [int(v) for v in self.n_h]


def _arrays(summaries: Sequence[StratumSummary]) -> tuple[np.ndarray, np.ndarray]:
    N = np.array([s.N_h for s in summaries], dtype=float)
    sd = np.array([s.sd_h for s in summaries], dtype=float)
    return N, sd


def variance_proxy(N, sd, n) -> float:
    """``sum N_h^2 sd_h^2 (1/n_h - 1/N_h)``; an empty stratum with ``sd_h > 0`` is infinite."""
    N, sd, n = (np.asarray(a, dtype=float) for a in (N, sd, n))
    a = (N * sd) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (1.0 / n - 1.0 / N), 0.0)
    return float(np.sum(terms))


def neyman_continuous(summaries: Sequence[StratumSummary], n: float) -> np.ndarray:
    """``n_h = n N_h sd_h / sum_k N_k sd_k``, before any rounding or flooring."""
    if not n > 0:
        raise AllocationError("total sample size must be positive")
    N, sd = _arrays(summaries)
    total = np.sum(N * sd)
    if not total > 0:
        raise AllocationError("every stratum has sd_h = 0; nothing to allocate on")
    return n * N * sd / total


def _priority(a: float, k: int) -> float:
    # sqrt of the objective drop from granting unit k+1 to a stratum holding k
    if a == 0:
        return 0.0
    if k == 0:
        return np.inf
    return a / np.sqrt(k * (k + 1.0))


def _greedy(a: np.ndarray, start: np.ndarray, ceiling: np.ndarray, budget: int) -> np.ndarray:
    counts = start.astype(np.int64).copy()
    heap = [(-_priority(a[h], counts[h]), h) for h in range(len(a)) if counts[h] < ceiling[h]]
    heapq.heapify(heap)
    for _ in range(budget):
        _, h = heapq.heappop(heap)
        counts[h] += 1
        if counts[h] < ceiling[h]:
            heapq.heappush(heap, (-_priority(a[h], counts[h]), h))
    return counts


def exact_integer_allocation(summaries: Sequence[StratumSummary], n: int,
                             floor: int | Sequence[int] = DEFAULT_FLOOR,
                             ceilings: Sequence[int] | None = None) -> Allocation:
    """Integer allocation minimizing ``sum N_h^2 sd_h^2 (1/n_h - 1/N_h)``.

    Each stratum starts at its floor; the remaining units go one at a time to
    the stratum with the largest ``N_h sd_h / sqrt(n_h (n_h + 1))`` that is
    still below its ceiling (lowest index on ties). The objective is separable
    and convex in each ``n_h``, so this greedy path is exactly optimal.
    """
    N, sd = _arrays(summaries)
    return _allocate(N, N * sd, n, floor, ceilings, sd)


def _allocate(N, a, n, floor, ceilings, sd) -> Allocation:
    H = len(N)
    n = int(n)
    lo = np.broadcast_to(np.asarray(floor, dtype=np.int64), (H,)).copy()
    hi = N.astype(np.int64) if ceilings is None else np.asarray(ceilings, dtype=np.int64)
    bad = np.flatnonzero(lo > hi)
    if bad.size:
        h = int(bad[0])
        raise AllocationError(f"floor infeasible: stratum {h} has floor {lo[h]} above its ceiling {hi[h]}")
    if lo.sum() > n:
        raise AllocationError(f"floor infeasible: floors sum to {lo.sum()} > n = {n}")
    if hi.sum() < n:
        raise AllocationError(f"ceiling infeasible: ceilings sum to {hi.sum()} < n = {n}")
    counts = _greedy(a, lo, hi, n - int(lo.sum()))
    return Allocation(counts, variance_proxy(N, sd, counts), lo, hi)


def wave2_allocation(summaries: Sequence[StratumSummary], n: int,
                     already_sampled: Sequence[int]) -> np.ndarray:
    """Units to draw in wave 2 so the combined sample is optimal for the updated sd.

    ``summaries`` carry the updated sd. The unconstrained target for ``n`` is
    computed first; strata already at or above it get nothing. The remaining
    budget is then placed greedily on top of what is already sampled, so the
    combined counts minimize the objective subject to ``n_h >= already_h``.
    """
    N, sd = _arrays(summaries)
    already = np.asarray(already_sampled, dtype=np.int64)
    remaining = int(n) - int(already.sum())
    if remaining < 0:
        raise AllocationError(f"already sampled {already.sum()} exceeds total n = {n}")
    if remaining == 0:
        return np.zeros(len(N), dtype=np.int64)
    target = exact_integer_allocation(summaries, n, floor=0).n_h
    ceiling = np.where(already >= target, already, N.astype(np.int64))
    if ceiling.sum() < n:
        # oversampled strata absorb every unit elsewhere; let the rest fill to N_h
        ceiling = N.astype(np.int64)
    if ceiling.sum() < n:
        raise AllocationError(f"ceiling infeasible: only {int(N.sum())} rows for n = {n}")
    combined = _greedy(N * sd, already, ceiling, remaining)
    return combined - already


def proportional_allocation(stratum_sizes: Sequence[int], n: int,
                            floor: int = DEFAULT_FLOOR) -> Allocation:
    """Integer allocation closest to ``n_h`` proportional to ``N_h``."""
    N = np.asarray(stratum_sizes, dtype=float)
    return _allocate(N, N, n, floor, None, np.ones(len(N)))


def balanced_allocation(stratum_sizes: Sequence[int], n: int,
                        floor: int = DEFAULT_FLOOR) -> Allocation:
    """``n/H`` per stratum with the remainder to the lowest indices.

    A stratum smaller than its share is taken whole and the excess is spread
    over the others by the same rule.
    """
    N = np.asarray(stratum_sizes, dtype=float)
    return _allocate(N, np.ones(len(N)), n, floor, None, 1.0 / N)
