"""Expected-wait matching under exponential re-entry times.

A seller is either available at a known time (idle now, or busy for a known
remaining duration) or absent, in which case it re-enters after an
``Exp(alpha)`` delay. The wait for a query served by two sellers is the later
of the two finish times, and its expectation has a closed form in all three
combinations of those cases:

* both known:        ``max(c1, c2)``
* one random (c_r):  ``c_k + exp(-alpha*d)/alpha`` if ``d = c_k - c_r >= 0`` else ``c_r + 1/alpha``
* both random:       ``max(c) + 1/alpha + exp(-alpha*|c1 - c2|) / (2*alpha)``

where ``c_i`` is the seller's known delay plus its compute time. The matcher
assigns each pending query the pair with the smallest expectation, resolving
conflicts by each query's random priority, starts the matches whose sellers
are both available now, and repeats on the remainder until nothing new starts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _accel, _kernels
from .core import DomainError, compute_time
from .matching import MatchDecision

DEFAULT_TOP_K = 16


@dataclass(frozen=True)
class ExpParams:
    alpha: float  # 1/ms

    def __post_init__(self):
        if not self.alpha > 0 or not math.isfinite(self.alpha):
            raise DomainError(f"alpha must be positive, got {self.alpha}")

    @property
    def mean(self) -> float:
        return 1.0 / self.alpha


@dataclass(frozen=True)
class SellerAvailability:
    device: int
    perf: float
    base_delay: int = 0
    stochastic: bool = False

    def __post_init__(self):
        if self.base_delay < 0:
            raise DomainError(f"base_delay must be >= 0, got {self.base_delay}")


@dataclass(frozen=True)
class DistributionalPolicy:
    alpha: float
    top_k: Optional[int] = DEFAULT_TOP_K
    name: str = "Distributional"

    def __post_init__(self):
        ExpParams(self.alpha)
        if self.top_k is not None and self.top_k < 2:
            raise DomainError(f"top_k must be >= 2 or None, got {self.top_k}")

    @property
    def label(self) -> str:
        return self.name


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")


def expected_max(c1: float, stoch1: bool, c2: float, stoch2: bool, alpha: float) -> float:
    """E[max(c1 + X1, c2 + X2)], X_i ~ Exp(alpha) if stoch_i else 0."""
    _check_alpha(alpha)
    return float(_kernels.emax(float(c1), bool(stoch1), float(c2), bool(stoch2), float(alpha)))


def expected_max_array(c1, stoch1, c2, stoch2, alpha: float) -> np.ndarray:
    """Vectorised ``expected_max`` over broadcastable arrays."""
    _check_alpha(alpha)
    c1, c2 = np.asarray(c1, np.float64), np.asarray(c2, np.float64)
    s1, s2 = np.asarray(stoch1, bool), np.asarray(stoch2, bool)
    c1, c2, s1, s2 = np.broadcast_arrays(c1, c2, s1, s2)
    hi, lo = np.maximum(c1, c2), np.minimum(c1, c2)
    both = hi + 1.0 / alpha + np.exp(-alpha * (hi - lo)) / (2.0 * alpha)
    det = np.where(s1, c2, c1)
    sto = np.where(s1, c1, c2)
    d = det - sto
    one = np.where(d >= 0, det + np.exp(-alpha * np.maximum(d, 0.0)) / alpha, sto + 1.0 / alpha)
    return np.where(s1 & s2, both, np.where(s1 | s2, one, hi))


def expected_max_wait(tokens: int, a1: SellerAvailability, a2: SellerAvailability,
                      alpha: float) -> float:
    """Expected completion delay (ms) of a ``tokens``-sized query served by two sellers."""
    _check_alpha(alpha)
    c1 = a1.base_delay + compute_time(a1.perf, tokens)
    c2 = a2.base_delay + compute_time(a2.perf, tokens)
    return expected_max(c1, a1.stochastic, c2, a2.stochastic, alpha)


# --
# Monte Carlo oracle


def monte_carlo_max(c1: float, stoch1: bool, c2: float, stoch2: bool, alpha: float,
                    n: int, rng: np.random.Generator, chunk: int = 250_000) -> float:
    """Sample mean of max(c1 + X1, c2 + X2) over ``n`` independent draws."""
    _check_alpha(alpha)
    total = 0.0
    left = n
    while left:
        m = min(chunk, left)
        x1 = c1 + rng.exponential(1.0 / alpha, m) if stoch1 else np.full(m, c1)
        x2 = c2 + rng.exponential(1.0 / alpha, m) if stoch2 else np.full(m, c2)
        total += float(np.maximum(x1, x2).sum())
        left -= m
    return total / n


@dataclass(frozen=True)
class OracleResult:
    case: str
    c1: float
    c2: float
    alpha: float
    closed_form: float
    estimate: float

    @property
    def rel_error(self) -> float:
        return abs(self.closed_form - self.estimate) / abs(self.estimate)


CASES = {"deterministic": (False, False), "one_stochastic": (False, True),
         "both_stochastic": (True, True)}


def oracle_check(n_triples: int = 20, n_samples: int = 1_000_000, seed: int = 20240101,
                 rtol: float = 0.005, form=expected_max) -> tuple[bool, list[OracleResult]]:
    """Compare ``form`` against Monte Carlo on random (c1, c2, alpha) per case.

    Also includes the known value E[max of two iid Exp(alpha)] = 3/(2 alpha).
    Returns (all within ``rtol``, results).
    """
    rng = np.random.default_rng(seed)
    results = []
    for case, (s1, s2) in CASES.items():
        for _ in range(n_triples):
            alpha = float(10.0 ** rng.uniform(-3, 0))  # 1/ms, mean delays 1 ms .. 1 s
            c1, c2 = (float(x) for x in rng.uniform(0.0, 3.0 / alpha, 2))
            est = monte_carlo_max(c1, s1, c2, s2, alpha, n_samples, rng)
            results.append(OracleResult(case, c1, c2, alpha, form(c1, s1, c2, s2, alpha), est))
    for alpha in (2.0, 0.001):
        est = monte_carlo_max(0.0, True, 0.0, True, alpha, n_samples, rng)
        results.append(OracleResult("iid_known_value", 0.0, 0.0, alpha, form(0.0, True, 0.0, True, alpha), est))
        results.append(OracleResult("iid_exact", 0.0, 0.0, alpha, form(0.0, True, 0.0, True, alpha), 1.5 / alpha))
    return all(r.rel_error <= rtol for r in results), results


# --
# Matcher


@dataclass
class DistSnapshot:
    """Pending queries plus every device's availability at ``now``."""

    now: int
    query_id: np.ndarray
    tokens: np.ndarray
    random_priority: np.ndarray
    device_id: np.ndarray
    perf: np.ndarray
    base_delay: np.ndarray
    stochastic: np.ndarray

    @classmethod
    def from_objects(cls, now, queries: Sequence[tuple[int, int, float]],
                     sellers: Sequence[SellerAvailability]) -> "DistSnapshot":
        """``queries`` are (query_id, tokens, random_priority) triples."""
        return cls(
            now=now,
            query_id=np.array([q[0] for q in queries], dtype=np.int64),
            tokens=np.array([q[1] for q in queries], dtype=np.int64),
            random_priority=np.array([q[2] for q in queries], dtype=np.float64),
            device_id=np.array([s.device for s in sellers], dtype=np.int64),
            perf=np.array([s.perf for s in sellers], dtype=np.float64),
            base_delay=np.array([s.base_delay for s in sellers], dtype=np.int64),
            stochastic=np.array([s.stochastic for s in sellers], dtype=bool),
        )


def _best_pair_numpy(cost, stoch, bound, order, alpha, limit):
    k = min(limit, order.shape[0])
    if k < 2:
        return -1, -1, math.inf
    idx = order[:k]
    c, s = cost[idx], stoch[idx]
    vals = expected_max_array(c[:, None], s[:, None], c[None, :], s[None, :], alpha)
    excluded = np.isinf(bound[idx])
    keep = np.triu(np.ones((k, k), dtype=bool), 1) & ~excluded[:, None] & ~excluded[None, :]
    vals = np.where(keep, vals, np.inf)
    flat = int(np.argmin(vals.T))  # row-major over (j, i): same scan order as the kernel
    j, i = divmod(flat, k)
    if not np.isfinite(vals[i, j]):
        return -1, -1, math.inf
    return int(idx[i]), int(idx[j]), float(vals[i, j])


def best_pair(cost, stoch, bound, order, alpha, limit):
    if _accel.USE_NUMBA:
        i, j, v = _kernels.best_pair(cost, stoch, bound, order, alpha, limit)
        return int(i), int(j), float(v)
    return _best_pair_numpy(cost, stoch, bound, order, alpha, limit)


def _plan_numpy(snap: DistSnapshot, alpha: float, limit: int) -> list[tuple[int, int, int]]:
    n_dev = snap.device_id.shape[0]
    base = snap.base_delay.astype(np.float64)
    stoch = snap.stochastic.copy()
    remaining = list(np.lexsort((snap.query_id, -snap.random_priority)))
    starts = []
    while remaining:
        claimed = np.zeros(n_dev, dtype=bool)
        started = []
        for qi in remaining:
            cost = base + np.ceil(snap.tokens[qi] / snap.perf)
            bound = cost + stoch / alpha
            bound[claimed] = np.inf
            order = np.lexsort((snap.device_id, bound))
            i, j, _ = best_pair(cost, stoch, bound, order, alpha, limit)
            if i < 0:
                continue
            claimed[i] = claimed[j] = True
            if base[i] == 0 and base[j] == 0 and not stoch[i] and not stoch[j]:
                started.append((qi, i, j))
        if not started:
            break
        for qi, i, j in started:
            for s in (i, j):
                base[s] = float(math.ceil(snap.tokens[qi] / snap.perf[s]))
        done = {qi for qi, _, _ in started}
        remaining = [qi for qi in remaining if qi not in done]
        starts.extend(started)
    return starts


def plan_distributional(snap: DistSnapshot, alpha: float,
                        top_k: Optional[int] = DEFAULT_TOP_K) -> list[tuple[int, int, int]]:
    """Starts for this instant as (query index, seller index, seller index) triples."""
    _check_alpha(alpha)
    n_dev = snap.device_id.shape[0]
    limit = n_dev if top_k is None else min(int(top_k), n_dev)
    if not _accel.USE_NUMBA:
        return _plan_numpy(snap, alpha, limit)
    qorder = np.lexsort((snap.query_id, -snap.random_priority)).astype(np.int64)
    rows = _kernels.plan_distributional(
        snap.tokens.astype(np.int64), qorder, snap.device_id.astype(np.int64),
        snap.perf.astype(np.float64), snap.base_delay.astype(np.int64),
        snap.stochastic.astype(np.bool_), float(alpha), int(limit))
    return [(int(q), int(i), int(j)) for q, i, j in rows]


def match_distributional(snap: DistSnapshot, alpha: float, rng=None,
                         top_k: Optional[int] = DEFAULT_TOP_K) -> list[MatchDecision]:
    """Decisions for every pending query; those not started now are deferred.

    ``rng`` is accepted for interface symmetry with the heuristic matchers; the
    tie-breaking priorities are already part of the snapshot.
    """
    starts = {qi: (i, j) for qi, i, j in plan_distributional(snap, alpha, top_k)}
    out = []
    for qi in np.lexsort((snap.query_id, -snap.random_priority)):
        qid = int(snap.query_id[qi])
        if qi in starts:
            i, j = starts[qi]
            out.append(MatchDecision(qid, (int(snap.device_id[i]), int(snap.device_id[j])), False))
        else:
            out.append(MatchDecision.defer(qid))
    return out
