"""VCG priority payments: discrete externality sums, a removal oracle, and
the continuous schedule obtained by integrating cost times delay gradient.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numba
import numpy as np
from scipy import stats


@dataclass(frozen=True)
class StaticInstance:
    """Equal-size transactions in priority order (index 0 = highest priority).

    ``delays[j]`` is the delay of whoever occupies queue position ``j``; with
    ``slots_per_block`` transactions per block this is ``ceil((j+1)/slots)``.
    An explicit ``delays`` vector overrides the slot rule.
    """

    costs: tuple[float, ...]
    slots_per_block: int = 1
    delays: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.slots_per_block < 1:
            raise ValueError("slots_per_block must be >= 1")
        if self.delays is not None:
            if len(self.delays) != len(self.costs):
                raise ValueError("delays and costs differ in length")
            if any(b < a for a, b in zip(self.delays, self.delays[1:])):
                raise ValueError("delays must be weakly increasing in queue position")

    @classmethod
    def from_costs(cls, costs: Sequence[float], slots_per_block: int = 1) -> StaticInstance:
        """Sort costs into priority order (highest cost first)."""
        return cls(tuple(sorted((float(c) for c in costs), reverse=True)), slots_per_block)

    @property
    def n(self) -> int:
        return len(self.costs)

    def position_delays(self, n: int | None = None) -> tuple[float, ...]:
        n = self.n if n is None else n
        if self.delays is not None:
            return self.delays[:n]
        return tuple(float(-(-(j + 1) // self.slots_per_block)) for j in range(n))

    @property
    def W(self) -> tuple[float, ...]:
        return self.position_delays()


def _check_rank(inst: StaticInstance, m: int) -> None:
    if not 1 <= m <= inst.n:
        raise IndexError(f"rank {m} outside 1..{inst.n}")


def vcg_payment_discrete(inst: StaticInstance, m: int) -> float:
    """Externality of the rank-``m`` transaction (1-based) on those behind it.

    ``sum_{j>m} c_j (W_j - W_{j-1})``, accumulated with :func:`math.fsum`
    so the result is correctly rounded.
    """
    _check_rank(inst, m)
    c, W = inst.costs, inst.W
    return math.fsum(c[j] * (W[j] - W[j - 1]) for j in range(m, inst.n))


def _replay_queue(n: int, inst: StaticInstance) -> list[float]:
    """Delays of ``n`` queued transactions when blocks are filled in order."""
    if inst.delays is not None:
        return list(inst.delays[:n])
    out, height, free = [], 0, 0
    for _ in range(n):
        if free == 0:
            height += 1
            free = inst.slots_per_block
        out.append(float(height))
        free -= 1
    return out


def vcg_payment_bruteforce(inst: StaticInstance, m: int) -> float:
    """Same externality, measured by deleting ``m`` and replaying the queue."""
    _check_rank(inst, m)
    others = [j for j in range(inst.n) if j != m - 1]
    with_m = _replay_queue(inst.n, inst)
    without_m = _replay_queue(inst.n - 1, inst)
    return math.fsum(inst.costs[j] * (with_m[j] - without_m[k]) for k, j in enumerate(others))


# -- continuous schedule -----------------------------------------------------

@dataclass(frozen=True)
class FeeSchedule:
    """Fee as a function of priority percentile, tabulated on a grid."""

    p: np.ndarray
    b: np.ndarray
    kappa: float
    weight_wu: float

    def __call__(self, p) -> np.ndarray:
        return np.interp(p, self.p, self.b)

    def derivative(self) -> tuple[np.ndarray, np.ndarray]:
        """Central differences at interior grid points."""
        db = (self.b[2:] - self.b[:-2]) / (self.p[2:] - self.p[:-2])
        return self.p[1:-1], db


def _sample(fn, q: np.ndarray) -> np.ndarray:
    if callable(fn):
        v = np.asarray(fn(q), dtype=float)
        return np.broadcast_to(v, q.shape).astype(float) if v.ndim == 0 else v
    return np.broadcast_to(np.asarray(fn, dtype=float), q.shape).astype(float)


def compute_vcg_schedule(
    cost_quantile: Callable[[np.ndarray], np.ndarray] | float,
    slope: Callable[[np.ndarray], np.ndarray] | float,
    kappa: float = 1.0,
    weight_wu: float = 1.0,
    grid_m: int = 1000,
) -> FeeSchedule:
    """Integrate ``kappa * weight * c(q) * D(q)`` from zero priority upward.

    Parameters
    ----------
    cost_quantile, slope : callable or scalar
        ``c(q)`` (nondecreasing, nonnegative) and the delay gradient
        ``D(q) >= 0``; either may be a constant.
    grid_m : int
        Number of equally spaced grid points on ``[0, 1]``.

    Returns
    -------
    FeeSchedule
        Composite-trapezoid cumulative integral, ``b(0) = 0``.
    """
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    if kappa <= 0 or weight_wu <= 0:
        raise ValueError("kappa and weight must be positive")
    q = np.linspace(0.0, 1.0, grid_m)
    c = _sample(cost_quantile, q)
    d = _sample(slope, q)
    if np.any(c < 0) or np.any(d < 0):
        raise ValueError("cost and delay gradient samples must be nonnegative")
    f = kappa * weight_wu * c * d
    b = np.concatenate(([0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(q))))
    return FeeSchedule(q, b, float(kappa), float(weight_wu))


def foc_residual(schedule: FeeSchedule, cost_quantile, slope) -> np.ndarray:
    """``|kappa*w*c(p)*D(p) - b'(p)|`` at interior grid points."""
    p, db = schedule.derivative()
    lhs = schedule.kappa * schedule.weight_wu * _sample(cost_quantile, p) * _sample(slope, p)
    return np.abs(lhs - db)


# -- single crossing ---------------------------------------------------------

@numba.njit(cache=True)
def _discordant(c_rank, p_rank, n_p):
    # pairs with c_i < c_j and p_i > p_j; ties in either coordinate are ignored
    order = np.argsort(c_rank, kind="mergesort")
    tree = np.zeros(n_p + 1, dtype=np.int64)
    inserted = 0
    total = 0
    i = 0
    n = order.size
    while i < n:
        j = i
        while j < n and c_rank[order[j]] == c_rank[order[i]]:
            j += 1
        for k in range(i, j):
            r = p_rank[order[k]] + 1
            s = 0
            while r > 0:
                s += tree[r]
                r -= r & -r
            total += inserted - s
        for k in range(i, j):
            r = p_rank[order[k]] + 1
            while r <= n_p:
                tree[r] += 1
                r += r & -r
            inserted += 1
        i = j
    return total


def count_single_crossing_violations(costs, percentiles) -> int:
    """Number of pairs where the costlier agent holds strictly lower priority."""
    c = np.asarray(costs, dtype=float)
    p = np.asarray(percentiles, dtype=float)
    if c.shape != p.shape:
        raise ValueError("costs and percentiles differ in shape")
    if c.size < 2:
        return 0
    _, c_rank = np.unique(c, return_inverse=True)
    p_vals, p_rank = np.unique(p, return_inverse=True)
    return int(_discordant(c_rank.astype(np.int64), p_rank.astype(np.int64), p_vals.size))


@dataclass(frozen=True)
class SingleCrossingReport:
    n: int
    violations: int
    spearman: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def single_crossing_report(costs, percentiles) -> SingleCrossingReport:
    c = np.asarray(costs, dtype=float)
    p = np.asarray(percentiles, dtype=float)
    rho = float(stats.spearmanr(c, p).statistic) if c.size > 1 and np.ptp(c) > 0 and np.ptp(p) > 0 else 1.0
    return SingleCrossingReport(int(c.size), count_single_crossing_violations(c, p), rho)
