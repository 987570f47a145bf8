"""Heuristic matchers.

A matcher is the composition of a trigger (instant or scheduled), a query
reordering, a seller selector, a partial-matching switch and an optional
per-round probabilistic skip. The per-query functions (``reorder_*``,
``select_*``, ``probabilistic_skip``) work on small Python objects and are the
readable reference; ``run_matching_round`` / ``plan_round`` evaluate a whole
round over array snapshots through the compiled kernel and are what the
simulator calls.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from . import _kernels
from .core import DomainError, EventKind, compute_time

DEFAULT_PERIOD_MS = 1000
DEFAULT_SKIP_PROBABILITY = 0.1


class Trigger(enum.Enum):
    INSTANT = "instant"
    SCHEDULED = "scheduled"


class Reorder(enum.Enum):
    FIFO = "fifo"
    MIN_VARIANCE = "min_variance"
    HARDEST_TO_FULFILL = "hardest_to_fulfill"


class Select(enum.Enum):
    FIFO = "fifo"
    GREEDY_FASTEST = "greedy_fastest"
    SP_FASTEST_ON_TIME = "sp_fastest_on_time"
    SP_SLOWEST_ON_TIME = "sp_slowest_on_time"


@dataclass(frozen=True)
class MatcherPolicy:
    trigger: Trigger = Trigger.INSTANT
    reorder: Reorder = Reorder.FIFO
    select: Select = Select.FIFO
    partial_matching: bool = False
    skip_probability: float = 0.0
    period_ms: int = DEFAULT_PERIOD_MS
    reverse_order: bool = False
    credit_floor: float = -math.inf
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.skip_probability <= 1.0:
            raise DomainError(f"skip_probability must be in [0, 1], got {self.skip_probability}")
        if self.trigger is Trigger.SCHEDULED and self.period_ms <= 0:
            raise DomainError(f"scheduled period must be positive, got {self.period_ms}")

    def triggers_on(self, kind: EventKind) -> bool:
        if self.trigger is Trigger.INSTANT:
            return kind in (EventKind.QUERY_ARRIVAL, EventKind.COMPUTATION_DONE)
        return kind is EventKind.MATCH_TICK

    @property
    def label(self) -> str:
        return self.name or (
            f"{self.trigger.value}-{self.reorder.value}{'-rev' if self.reverse_order else ''}"
            f"-{self.select.value}{'-partial' if self.partial_matching else ''}"
            f"{f'-skip{self.skip_probability:g}' if self.skip_probability else ''}"
        )


def _alias_table(period_ms: int, skip_probability: float) -> dict[str, MatcherPolicy]:
    sched = dict(trigger=Trigger.SCHEDULED, period_ms=period_ms)
    sp = dict(reorder=Reorder.HARDEST_TO_FULFILL, select=Select.SP_SLOWEST_ON_TIME)
    return {
        "InstantFIFO": MatcherPolicy(reorder=Reorder.FIFO, select=Select.FIFO),
        "InstantGreedy": MatcherPolicy(reorder=Reorder.FIFO, select=Select.GREEDY_FASTEST),
        "InstantSP": MatcherPolicy(**sp),
        "InstantSPImproved": MatcherPolicy(**sp, partial_matching=True),
        "InstantSPReversedImproved": MatcherPolicy(**sp, partial_matching=True, reverse_order=True),
        "ScheduledSP": MatcherPolicy(**sched, **sp),
        "ScheduledMinVar": MatcherPolicy(**sched, reorder=Reorder.MIN_VARIANCE,
                                         select=Select.GREEDY_FASTEST),
        "SelectiveProbablisticScheduledGreedy": MatcherPolicy(
            **sched, reorder=Reorder.FIFO, select=Select.GREEDY_FASTEST,
            skip_probability=skip_probability),
        "SelectiveScheduledMinVariance": MatcherPolicy(
            **sched, reorder=Reorder.MIN_VARIANCE, select=Select.GREEDY_FASTEST,
            skip_probability=skip_probability),
    }


#: Row names of the published comparison table, in table order.
TABLE1_MATCHERS = (
    "InstantSPReversedImproved",
    "InstantSPImproved",
    "InstantSP",
    "ScheduledSP",
    "ScheduledMinVar",
    "SelectiveProbablisticScheduledGreedy",
    "InstantFIFO",
    "InstantGreedy",
)

ALIASES = tuple(_alias_table(DEFAULT_PERIOD_MS, DEFAULT_SKIP_PROBABILITY))


def _canonical(name: str) -> Optional[str]:
    key = name.strip().lower()
    if key.endswith("matcher"):
        key = key[: -len("matcher")]
    for alias in ALIASES:
        if alias.lower() == key:
            return alias
    return None


def policy_from_alias(name: str, period_ms: int = DEFAULT_PERIOD_MS,
                      skip_probability: float = DEFAULT_SKIP_PROBABILITY) -> MatcherPolicy:
    """Expand a matcher name such as ``"InstantFIFO"`` or ``"InstantGreedyMatcher"``."""
    alias = _canonical(name)
    if alias is None:
        raise DomainError(f"unknown matcher {name!r}; known: {', '.join(ALIASES)}")
    return replace(_alias_table(period_ms, skip_probability)[alias], name=alias)


def is_alias(name: str) -> bool:
    return _canonical(name) is not None


# --
# Per-query reference operations


@dataclass
class PendingQuery:
    query_id: int
    tokens: int
    arrival: int
    buyer: int = -1
    buyer_perf: float = 1.0
    seq: Optional[int] = None
    need: int = 2
    bound: int = -1  # seller already computing under a partial match
    bound_credit: int = 0
    rounds_waited: int = 0
    random_priority: float = 0.0

    def __post_init__(self):
        if self.seq is None:
            self.seq = self.query_id

    @property
    def priority(self) -> float:
        """Min-variance priority, ``tokens * 2**rounds_waited``."""
        return math.ldexp(float(self.tokens), self.rounds_waited)

    @property
    def baseline(self) -> int:
        return 2 * compute_time(self.buyer_perf, self.tokens)

    @property
    def deadline(self) -> int:
        return self.arrival + self.baseline


@dataclass(frozen=True)
class Seller:
    id: int
    perf: float
    join_seq: int = 0
    busy_for: int = 0  # remaining compute on the current task
    credit: int = 0


@dataclass(frozen=True)
class MatchDecision:
    query_id: int
    sellers: tuple[int, ...] = ()
    deferred: bool = True

    @classmethod
    def defer(cls, query_id: int) -> "MatchDecision":
        return cls(query_id, (), True)


def reorder_fifo(pending: Sequence[PendingQuery]) -> list[PendingQuery]:
    return sorted(pending, key=lambda q: (q.arrival, q.seq))


def _minvar_key(q: PendingQuery):
    # tokens * 2**r compared exactly: tokens = m * 2**e with m in [0.5, 1)
    m, e = math.frexp(q.tokens)
    return (-(e + q.rounds_waited), -m, -q.random_priority, q.seq)


def reorder_min_variance(pending: Sequence[PendingQuery]) -> list[PendingQuery]:
    """Descending priority; equal priorities go to the higher random priority."""
    return sorted(pending, key=_minvar_key)


def double_priorities(unmatched: Sequence[PendingQuery]) -> None:
    """End-of-round rule: every query still waiting has its priority doubled."""
    for q in unmatched:
        q.rounds_waited += 1


def reorder_hardest_to_fulfill(pending: Sequence[PendingQuery],
                               buyer_perf: Optional[Mapping[int, float]] = None,
                               reverse: bool = False) -> list[PendingQuery]:
    """Ascending self-compute baseline (tightest deadline first); ``reverse`` flips it."""
    def baseline(q):
        perf = buyer_perf[q.buyer] if buyer_perf is not None else q.buyer_perf
        return 2 * compute_time(perf, q.tokens)

    sign = -1 if reverse else 1
    return sorted(pending, key=lambda q: (sign * baseline(q), q.arrival, q.seq))


def _take(query: PendingQuery, candidates: Sequence[Seller], partial: bool,
          credit_floor: float) -> MatchDecision:
    chosen: list[Seller] = []
    for s in candidates:
        if s.id == query.bound:
            continue
        if query.need == 1:
            if query.bound_credit + s.credit < credit_floor:
                continue
        elif chosen and chosen[0].credit + s.credit < credit_floor:
            continue
        chosen.append(s)
        if len(chosen) == query.need:
            break
    if len(chosen) == query.need or (partial and chosen):
        return MatchDecision(query.query_id, tuple(s.id for s in chosen), False)
    return MatchDecision.defer(query.query_id)


def select_fifo(query: PendingQuery, idle_sellers: Sequence[Seller], *,
                partial: bool = False, credit_floor: float = -math.inf) -> MatchDecision:
    ordered = sorted(idle_sellers, key=lambda s: (s.join_seq, s.id))
    return _take(query, ordered, partial, credit_floor)


def _fastest_first(sellers):
    return sorted(sellers, key=lambda s: (-s.perf, s.id))


def select_greedy_fastest(query: PendingQuery, idle_sellers: Sequence[Seller], *,
                          partial: bool = False, credit_floor: float = -math.inf) -> MatchDecision:
    return _take(query, _fastest_first(idle_sellers), partial, credit_floor)


def is_on_time(seller: Seller, query: PendingQuery, now: Optional[int] = None) -> bool:
    """Would ``seller`` finish ``query`` no later than the buyer could on its own?

    At the arrival instant this is ``busy_for + compute <= 2 * buyer compute``;
    later on, time already spent waiting is charged against the same budget.
    """
    now = query.arrival if now is None else now
    return now + seller.busy_for + compute_time(seller.perf, query.tokens) <= query.deadline


def select_sp_on_time(query: PendingQuery, idle_sellers: Sequence[Seller], *,
                      fastest: bool = True, now: Optional[int] = None,
                      max_market_perf: Optional[float] = None, partial: bool = False,
                      credit_floor: float = -math.inf) -> MatchDecision:
    """Fastest (or slowest) sellers that still deliver on time.

    When even the fastest device in the market (``max_market_perf``, default:
    fastest idle seller) cannot make the deadline, fall back to the fastest
    available sellers.
    """
    now = query.arrival if now is None else now
    if max_market_perf is None:
        max_market_perf = max((s.perf for s in idle_sellers), default=math.inf)
    if now + compute_time(max_market_perf, query.tokens) > query.deadline:
        return _take(query, _fastest_first(idle_sellers), partial, credit_floor)
    on_time = [s for s in idle_sellers if is_on_time(s, query, now)]
    ordered = _fastest_first(on_time) if fastest else sorted(on_time, key=lambda s: (s.perf, s.id))
    return _take(query, ordered, partial, credit_floor)


def probabilistic_skip(decision: MatchDecision, skip_probability: float,
                       rng: np.random.Generator) -> MatchDecision:
    if not 0.0 <= skip_probability <= 1.0:
        raise DomainError(f"skip_probability must be in [0, 1], got {skip_probability}")
    if skip_probability > 0.0 and rng.random() < skip_probability:
        return MatchDecision.defer(decision.query_id)
    return decision


# --
# Array round


@dataclass
class MarketSnapshot:
    """Pending queries and idle sellers at one instant, as parallel arrays."""

    now: int
    query_id: np.ndarray
    buyer: np.ndarray
    tokens: np.ndarray
    arrival: np.ndarray
    baseline: np.ndarray
    need: np.ndarray
    bound: np.ndarray
    bound_credit: np.ndarray
    rounds_waited: np.ndarray
    random_priority: np.ndarray
    seller_id: np.ndarray
    seller_perf: np.ndarray
    seller_join: np.ndarray
    seller_credit: np.ndarray
    max_perf: float

    @property
    def n_pending(self) -> int:
        return int(self.query_id.shape[0])

    @classmethod
    def from_objects(cls, now: int, pending: Sequence[PendingQuery], sellers: Sequence[Seller],
                     max_perf: Optional[float] = None) -> "MarketSnapshot":
        if max_perf is None:
            max_perf = max((s.perf for s in sellers), default=1.0)
        i64 = lambda xs: np.asarray(list(xs), dtype=np.int64)  # noqa: E731
        f64 = lambda xs: np.asarray(list(xs), dtype=np.float64)  # noqa: E731
        return cls(
            now=now,
            query_id=i64(q.query_id for q in pending),
            buyer=i64(q.buyer for q in pending),
            tokens=i64(q.tokens for q in pending),
            arrival=i64(q.arrival for q in pending),
            baseline=i64(q.baseline for q in pending),
            need=i64(q.need for q in pending),
            bound=i64(q.bound for q in pending),
            bound_credit=i64(q.bound_credit for q in pending),
            rounds_waited=i64(q.rounds_waited for q in pending),
            random_priority=f64(q.random_priority for q in pending),
            seller_id=i64(s.id for s in sellers),
            seller_perf=f64(s.perf for s in sellers),
            seller_join=i64(s.join_seq for s in sellers),
            seller_credit=i64(s.credit for s in sellers),
            max_perf=float(max_perf),
        )


def query_order(snap: MarketSnapshot, policy: MatcherPolicy) -> np.ndarray:
    """Processing order of the pending queries (indices into the snapshot)."""
    if policy.reorder is Reorder.FIFO:
        return np.lexsort((snap.query_id, snap.arrival))
    if policy.reorder is Reorder.MIN_VARIANCE:
        mant, expo = np.frexp(snap.tokens.astype(np.float64))
        return np.lexsort((snap.query_id, -snap.random_priority, -mant,
                           -(expo.astype(np.int64) + snap.rounds_waited)))
    sign = -1 if policy.reverse_order else 1
    return np.lexsort((snap.query_id, snap.arrival, sign * snap.baseline))


def _seller_orders(snap: MarketSnapshot, select: Select):
    fast = np.lexsort((snap.seller_id, -snap.seller_perf))
    if select is Select.FIFO:
        return np.lexsort((snap.seller_id, snap.seller_join)), fast
    if select is Select.SP_SLOWEST_ON_TIME:
        return np.lexsort((snap.seller_id, snap.seller_perf)), fast
    return fast, fast


def plan_round(snap: MarketSnapshot, policy: MatcherPolicy,
               rng: Optional[np.random.Generator] = None):
    """Evaluate one round. Returns ``(order, picks)``.

    ``picks[i]`` holds up to two indices into the snapshot's seller arrays for
    pending query ``i``; ``order`` is the processing order used.
    """
    n = snap.n_pending
    order = query_order(snap, policy)
    skip = np.zeros(n, dtype=np.bool_)
    if policy.skip_probability > 0.0 and n:
        if rng is None:
            raise DomainError("a skipping policy needs an rng")
        skip[order] = rng.random(n) < policy.skip_probability
    primary, fallback = _seller_orders(snap, policy.select)
    on_time = policy.select in (Select.SP_FASTEST_ON_TIME, Select.SP_SLOWEST_ON_TIME)
    picks = _kernels.assign_round(
        order, snap.tokens, snap.arrival + snap.baseline, snap.need, snap.bound,
        snap.bound_credit.astype(np.float64), skip,
        snap.seller_id, snap.seller_perf, snap.seller_credit.astype(np.float64),
        primary, fallback, _kernels.ON_TIME if on_time else _kernels.NO_FILTER,
        policy.partial_matching, float(policy.credit_floor), float(snap.max_perf), int(snap.now),
    )
    return order, picks


def run_matching_round(snap: MarketSnapshot, policy: MatcherPolicy,
                       rng: Optional[np.random.Generator] = None) -> list[MatchDecision]:
    """One decision per pending query, in processing order.

    Min-variance bookkeeping (doubling) is left to the caller, which owns the
    pending-query state.
    """
    order, picks = plan_round(snap, policy, rng)
    out = []
    for i in order:
        sel = tuple(int(snap.seller_id[j]) for j in picks[i] if j >= 0)
        out.append(MatchDecision(int(snap.query_id[i]), sel, not sel))
    return out
