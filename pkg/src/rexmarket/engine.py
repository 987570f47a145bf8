"""Discrete-event simulation of the exchange.

Devices cycle through: absent -> query arrives (device becomes a buyer and an
idle seller) -> computes tasks for itself or others -> leaves once its own
query is complete and it has no task in progress -> next query ``gap`` ms
after completion. Servers are always present and never issue queries.

Each run is a pure function of ``(SimConfig, matcher)``; randomness comes from
independent per-purpose streams spawned off one root seed.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import (DAY_MS, HOUR_MS, ContractError, Device, DeviceState, Distributions,
                   EventKind, InvariantError, QuerySource, Uniform, schedule_next_query)
from .distmatch import DistributionalPolicy, DistSnapshot, plan_distributional
from .economy import (CreditLedger, QualityModel, Verdict, raw_verification_probability,
                      settle_query, verification_draw)
from .matching import MarketSnapshot, MatcherPolicy, Reorder, Trigger, plan_round
from .metrics import MetricsSink, RecordTable, Summary, summarize

log = logging.getLogger(__name__)

Matcher = Union[MatcherPolicy, DistributionalPolicy]

DEFAULT_DISTRIBUTIONS = Distributions(
    query_gap=Uniform(0.0, float(HOUR_MS)),
    perf=Uniform(1.0, 100.0),
    task_size=Uniform(10_000.0, 5_000_000.0),
)

STREAMS = ("perf", "roles", "gaps", "tokens", "priority", "skip", "quality", "verify")

ARRIVAL = int(EventKind.QUERY_ARRIVAL)
DONE = int(EventKind.COMPUTATION_DONE)
TICK = int(EventKind.MATCH_TICK)


@dataclass(frozen=True)
class SimConfig:
    devices: int = 2000
    servers: int = 2
    server_perf: float = 1000.0
    distributions: Distributions = DEFAULT_DISTRIBUTIONS
    horizon_ms: int = DAY_MS
    seed: int = 0
    quality: QualityModel = field(default_factory=QualityModel)
    bad_actor_fraction: float = 0.0
    idle_sample_period_ms: int = 60_000

    def __post_init__(self):
        if self.devices < 0 or self.servers < 0:
            raise ValueError("device and server counts must be non-negative")
        if self.horizon_ms <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon_ms}")
        if not self.server_perf > 0:
            raise ValueError(f"server_perf must be positive, got {self.server_perf}")
        if not 0.0 <= self.bad_actor_fraction <= 1.0:
            raise ValueError(f"bad_actor_fraction must be in [0, 1], got {self.bad_actor_fraction}")
        if self.idle_sample_period_ms <= 0:
            raise ValueError("idle_sample_period_ms must be positive")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass
class SimulationReport:
    matcher: str
    seed: int
    horizon_ms: int
    issued: int
    completed: int
    pending_at_horizon: int
    records: RecordTable
    assignments: np.ndarray  # (query, seller, start, finish) for every started task
    device_perf: np.ndarray
    is_server: np.ndarray
    bad_actor: np.ndarray
    credits: np.ndarray
    verifications: int
    clamped: int
    flagged: int
    rounds: int
    idle_perf_samples: np.ndarray

    def summary(self, window: Optional[int] = None, fraction: Optional[float] = None) -> Summary:
        return summarize(self.records, window, fraction=fraction, verifications=self.verifications)


class _Queries:
    """Growable column store for every query created during a run."""

    int_cols = ("buyer", "tokens", "arrival", "baseline", "need", "bound", "rounds", "done",
                "seller0", "seller1", "completed")

    def __init__(self, capacity: int = 1024):
        self.n = 0
        for c in self.int_cols:
            setattr(self, c, np.full(capacity, -1, dtype=np.int64))
        self.rprio = np.zeros(capacity, dtype=np.float64)

    def _grow(self):
        cap = 2 * self.rprio.shape[0]
        for c in self.int_cols:
            old = getattr(self, c)
            new = np.full(cap, -1, dtype=np.int64)
            new[: old.shape[0]] = old
            setattr(self, c, new)
        rp = np.zeros(cap)
        rp[: self.n] = self.rprio[: self.n]
        self.rprio = rp

    def add(self, buyer, tokens, arrival, baseline, rprio) -> int:
        if self.n == self.rprio.shape[0]:
            self._grow()
        q = self.n
        self.buyer[q] = buyer
        self.tokens[q] = tokens
        self.arrival[q] = arrival
        self.baseline[q] = baseline
        self.need[q] = 2
        self.rounds[q] = 0
        self.done[q] = 0
        self.rprio[q] = rprio
        self.n += 1
        return q


class Simulation:
    def __init__(self, config: SimConfig, matcher: Matcher, sink: Optional[MetricsSink] = None):
        self.cfg = config
        self.matcher = matcher
        self.sink = sink if sink is not None else MetricsSink()
        self.rng = make_streams(config.seed)

        n_users, n_srv = config.devices, config.servers
        n = n_users + n_srv
        self.n_users = n_users
        perf = np.empty(n, dtype=np.float64)
        perf[:n_users] = np.maximum(config.distributions.perf.sample(self.rng["perf"], n_users), 1e-9)
        perf[n_users:] = config.server_perf
        self.perf = perf
        self.is_server = np.zeros(n, dtype=bool)
        self.is_server[n_users:] = True
        self.bad_actor = np.zeros(n, dtype=bool)
        n_bad = int(round(config.bad_actor_fraction * n_users))
        if n_bad:
            self.bad_actor[self.rng["roles"].choice(n_users, n_bad, replace=False)] = True

        self.present = self.is_server.copy()
        self.computing = np.zeros(n, dtype=bool)
        self.busy_until = np.full(n, -1, dtype=np.int64)
        self.open_query = np.full(n, -1, dtype=np.int64)
        self.join_seq = np.zeros(n, dtype=np.int64)
        self.next_query_at = np.full(n, -1, dtype=np.int64)
        self.ledger = CreditLedger(n)

        self.source = QuerySource(config.distributions.query_gap, config.distributions.task_size,
                                  self.rng["gaps"], self.rng["tokens"])
        self.q = _Queries()
        self.pending: list[int] = []
        self.heap: list[tuple] = []
        self.seq = 0
        self.join_counter = 0
        self.now = 0
        self.issued = 0
        self.completed = 0
        self.verifications = 0
        self.clamped = 0
        self.flagged = 0
        self.rounds = 0
        self.assign_log: list[tuple[int, int, int, int]] = []
        self.idle_samples: list[np.ndarray] = []

        for s in range(n_users, n):
            self._join_pool(s)

    # --
    # helpers

    def _push(self, time, kind, a=-1, b=-1):
        heapq.heappush(self.heap, (time, self.seq, kind, a, b))
        self.seq += 1

    def _join_pool(self, d):
        self.join_seq[d] = self.join_counter
        self.join_counter += 1

    def device(self, d: int) -> Device:
        """Snapshot of one device as a ``Device`` record."""
        if not self.present[d]:
            state = DeviceState.ABSENT
        elif self.computing[d]:
            state = DeviceState.COMPUTING_SELLER
        elif self.open_query[d] >= 0:
            state = DeviceState.WAITING_BUYER
        else:
            state = DeviceState.IDLE
        nq = int(self.next_query_at[d])
        return Device(id=d, perf=float(self.perf[d]), is_server=bool(self.is_server[d]),
                      credit=self.ledger[d], state=state,
                      busy_until=int(self.busy_until[d]) if self.computing[d] else None,
                      next_query_at=nq if nq >= 0 and not self.is_server[d] else None)

    def _schedule_query(self, d, completed_at):
        dev = Device(id=d, perf=float(self.perf[d]), is_server=bool(self.is_server[d]))
        ev = schedule_next_query(dev, completed_at, self.source, self.q.n, self.seq)
        qry = ev.query
        baseline = 2 * math.ceil(qry.tokens / self.perf[d])
        q = self.q.add(d, qry.tokens, qry.arrival, baseline, float(self.rng["priority"].random()))
        self.next_query_at[d] = qry.arrival
        self._push(ev.time, ARRIVAL, q)

    # --
    # event handlers

    def _arrive(self, q):
        d = int(self.q.buyer[q])
        if self.open_query[d] >= 0:
            raise InvariantError(f"device {d} issued query {q} while query {self.open_query[d]} is open")
        self.open_query[d] = q
        self.next_query_at[d] = -1
        if not self.present[d]:
            self.present[d] = True
            self._join_pool(d)
        elif not self.computing[d]:
            raise InvariantError(f"device {d} idle in the pool without an open query")
        self.pending.append(q)
        self.issued += 1

    def _start(self, q, s):
        if self.computing[s] or not self.present[s]:
            raise InvariantError(f"device {s} double-booked at t={self.now} (query {q})")
        if s == self.q.seller0[q]:
            raise InvariantError(f"device {s} assigned twice to query {q}")
        fin = self.now + math.ceil(self.q.tokens[q] / self.perf[s])
        if self.q.seller0[q] < 0:
            self.q.seller0[q] = s
            self.q.bound[q] = s
        else:
            self.q.seller1[q] = s
        self.q.need[q] -= 1
        self.computing[s] = True
        self.busy_until[s] = fin
        self.assign_log.append((q, s, self.now, fin))
        self._push(fin, DONE, s, q)

    def _done(self, s, q):
        self.computing[s] = False
        self.busy_until[s] = -1
        self.q.done[q] += 1
        if self.q.done[q] == 2:
            self._complete(q)
        if self.is_server[s] or self.open_query[s] >= 0:
            self._join_pool(s)
        else:
            self.present[s] = False

    def _complete(self, q):
        qs = self.q
        qs.completed[q] = self.now
        self.completed += 1
        b = int(qs.buyer[q])
        s0, s1 = int(qs.seller0[q]), int(qs.seller1[q])
        self.sink.add_raw(q, b, int(qs.tokens[q]), int(qs.arrival[q]), self.now,
                          int(qs.baseline[q]), s0, s1)
        self._settle(s0, s1)
        self.open_query[b] = -1
        if not self.computing[b]:
            self.present[b] = False
        self._schedule_query(b, self.now)

    def _settle(self, s0, s1):
        qm = self.cfg.quality
        r0 = qm.draw(self.rng["quality"], bool(self.bad_actor[s0]))
        r1 = qm.draw(self.rng["quality"], bool(self.bad_actor[s1]))
        raw = raw_verification_probability(self.ledger[s0], self.ledger[s1], r0.perplexity, r1.perplexity)
        prob = min(1.0, max(0.0, raw))
        if prob != raw:
            self.clamped += 1
        if verification_draw(prob, self.rng["verify"]) is Verdict.VERIFY:
            self.verifications += 1
        if settle_query(self.ledger, s0, s1, r0, r1).flagged:
            self.flagged += 1

    # --
    # matching

    def _match(self):
        if not self.pending:
            return
        self.rounds += 1
        if isinstance(self.matcher, DistributionalPolicy):
            self._match_distributional()
        else:
            self._match_heuristic()

    def _match_heuristic(self):
        policy = self.matcher
        qs = self.q
        pend = np.asarray(self.pending, dtype=np.int64)
        idle = np.flatnonzero(self.present & ~self.computing)
        if idle.size:
            bound = qs.bound[pend]
            snap = MarketSnapshot(
                now=self.now, query_id=pend, buyer=qs.buyer[pend], tokens=qs.tokens[pend],
                arrival=qs.arrival[pend], baseline=qs.baseline[pend], need=qs.need[pend],
                bound=bound,
                bound_credit=np.where(bound >= 0, self.ledger.balance[np.maximum(bound, 0)], 0),
                rounds_waited=qs.rounds[pend], random_priority=qs.rprio[pend],
                seller_id=idle, seller_perf=self.perf[idle], seller_join=self.join_seq[idle],
                seller_credit=self.ledger.balance[idle],
                max_perf=float(self.perf[self.present].max()),
            )
            order, picks = plan_round(snap, policy, self.rng["skip"])
            for i in order:
                for j in picks[i]:
                    if j >= 0:
                        self._start(int(pend[i]), int(idle[j]))
        still = qs.need[pend] > 0
        if policy.reorder is Reorder.MIN_VARIANCE:
            qs.rounds[pend[still]] += 1
        self.pending = pend[still].tolist()

    def _match_distributional(self):
        policy = self.matcher
        qs = self.q
        pend = np.asarray(self.pending, dtype=np.int64)
        dev = np.arange(self.perf.shape[0], dtype=np.int64)
        snap = DistSnapshot(
            now=self.now, query_id=pend, tokens=qs.tokens[pend], random_priority=qs.rprio[pend],
            device_id=dev, perf=self.perf,
            base_delay=np.where(self.computing, self.busy_until - self.now, 0),
            stochastic=~self.present,
        )
        for qi, i, j in plan_distributional(snap, policy.alpha, policy.top_k):
            self._start(int(pend[qi]), int(i))
            self._start(int(pend[qi]), int(j))
        self.pending = [q for q in self.pending if qs.need[q] > 0]

    # --
    # main loop

    def run(self) -> SimulationReport:
        cfg = self.cfg
        horizon = cfg.horizon_ms
        for d in range(self.n_users):
            self._schedule_query(d, 0)
        scheduled = isinstance(self.matcher, MatcherPolicy) and self.matcher.trigger is Trigger.SCHEDULED
        if scheduled and self.matcher.period_ms <= horizon:
            self._push(self.matcher.period_ms, TICK)
        instant = not scheduled
        next_sample = 0
        heap = self.heap
        while heap and heap[0][0] <= horizon:
            t = heap[0][0]
            while next_sample <= t:
                self._sample_idle()
                next_sample += cfg.idle_sample_period_ms
            self.now = t
            trigger = False
            while heap and heap[0][0] == t:
                _, _, kind, a, b = heapq.heappop(heap)
                if kind == ARRIVAL:
                    self._arrive(a)
                    trigger = trigger or instant
                elif kind == DONE:
                    self._done(a, b)
                    trigger = trigger or instant
                else:
                    trigger = True
                    nxt = t + self.matcher.period_ms
                    if nxt <= horizon:
                        self._push(nxt, TICK)
            if trigger:
                self._match()
        self._check_conservation()
        return self._report()

    def _sample_idle(self):
        idle = self.present & ~self.computing
        self.idle_samples.append(self.perf[idle])

    def _check_conservation(self):
        if self.issued != self.completed + int(np.count_nonzero(self.open_query >= 0)):
            raise InvariantError(
                f"issued {self.issued} != completed {self.completed} + open queries")
        if self.ledger.total() != 0:
            raise InvariantError(f"credit total drifted to {self.ledger.total()}")

    def _report(self) -> SimulationReport:
        m = self.matcher
        samples = np.concatenate(self.idle_samples) if self.idle_samples else np.zeros(0)
        assigns = np.array(self.assign_log, dtype=np.int64).reshape(-1, 4)
        return SimulationReport(
            matcher=m.label, seed=self.cfg.seed, horizon_ms=self.cfg.horizon_ms,
            issued=self.issued, completed=self.completed,
            pending_at_horizon=self.issued - self.completed,
            records=self.sink.table(), assignments=assigns,
            device_perf=self.perf.copy(), is_server=self.is_server.copy(),
            bad_actor=self.bad_actor.copy(), credits=self.ledger.balance.copy(),
            verifications=self.verifications, clamped=self.clamped, flagged=self.flagged,
            rounds=self.rounds, idle_perf_samples=samples,
        )


def run(config: SimConfig, matcher: Matcher, metrics_sink: Optional[MetricsSink] = None) -> SimulationReport:
    """Simulate ``config`` under ``matcher`` up to the horizon."""
    if isinstance(matcher, MatcherPolicy) or isinstance(matcher, DistributionalPolicy):
        return Simulation(config, matcher, metrics_sink).run()
    raise ContractError(f"unsupported matcher {matcher!r}")
