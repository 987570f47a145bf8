"""Domain types and small operations shared by the simulator and the matchers.

Time is integer milliseconds throughout. Performance is tokens per
millisecond, so a compute duration is ``ceil(tokens / perf)`` ms.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DAY_MS = 86_400_000
HOUR_MS = 3_600_000


class DomainError(ValueError):
    """An argument outside the domain of an operation."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class InvariantError(RuntimeError):
    """The simulation reached an inconsistent state (e.g. a double-booked device)."""


# --
# Distributions


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise DomainError(f"Uniform bounds must be finite, got ({self.lo}, {self.hi})")
        if self.lo > self.hi:
            raise DomainError(f"Uniform lo > hi ({self.lo} > {self.hi})")

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.lo, self.hi, size)


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not self.rate > 0 or not math.isfinite(self.rate):
            raise DomainError(f"Exponential rate must be positive, got {self.rate}")

    @property
    def mean(self) -> float:
        return 1.0 / self.rate

    def sample(self, rng: np.random.Generator, size=None):
        return rng.exponential(1.0 / self.rate, size)


Distribution = Uniform | Exponential


def distribution_from_dict(spec: dict) -> Distribution:
    """Build a distribution from ``{"kind": "uniform", "lo": .., "hi": ..}`` or
    ``{"kind": "exponential", "rate": ..}``."""
    spec = dict(spec)
    kind = str(spec.pop("kind", "")).lower()
    if kind == "uniform":
        expected = {"lo", "hi"}
        cls = Uniform
    elif kind == "exponential":
        expected = {"rate"}
        cls = Exponential
    else:
        raise DomainError(f"unknown distribution kind {kind!r}")
    if set(spec) != expected:
        raise DomainError(f"{kind} expects keys {sorted(expected)}, got {sorted(spec)}")
    return cls(**{k: float(v) for k, v in spec.items()})


def distribution_to_dict(dist: Distribution) -> dict:
    if isinstance(dist, Uniform):
        return {"kind": "uniform", "lo": dist.lo, "hi": dist.hi}
    return {"kind": "exponential", "rate": dist.rate}


@dataclass(frozen=True)
class Distributions:
    query_gap: Distribution  # ms between a completion and the buyer's next query
    perf: Distribution  # tokens / ms
    task_size: Distribution  # tokens

    def __post_init__(self):
        for name in ("perf", "task_size"):
            d = getattr(self, name)
            if isinstance(d, Uniform) and d.lo <= 0:
                raise DomainError(f"{name}: samples must be strictly positive (lo={d.lo})")
        if isinstance(self.query_gap, Uniform) and self.query_gap.lo < 0:
            raise DomainError(f"query_gap: negative lower bound {self.query_gap.lo}")


# --
# Devices, queries, events


class DeviceState(enum.Enum):
    ABSENT = "absent"
    WAITING_BUYER = "waiting_buyer"
    COMPUTING_SELLER = "computing_seller"
    IDLE = "idle"


@dataclass
class Device:
    id: int
    perf: float
    is_server: bool = False
    credit: int = 0
    state: DeviceState = DeviceState.ABSENT
    busy_until: Optional[int] = None
    next_query_at: Optional[int] = None

    def __post_init__(self):
        if not self.perf > 0:
            raise DomainError(f"device {self.id}: perf must be positive, got {self.perf}")
        if self.is_server and self.next_query_at is not None:
            raise ContractError(f"server {self.id} cannot have a pending query")


@dataclass
class Assignment:
    seller: int
    start: int
    finish: int


@dataclass
class Query:
    id: int
    buyer: int
    tokens: int
    arrival: int
    assignments: list[Assignment] = field(default_factory=list)
    completed_at: Optional[int] = None

    @property
    def completed(self) -> bool:
        return self.completed_at is not None


class EventKind(enum.IntEnum):
    # ordering only matters through Event.seq; values are stable for heap tuples
    QUERY_ARRIVAL = 0
    COMPUTATION_DONE = 1
    MATCH_TICK = 2


@dataclass(frozen=True)
class Event:
    time: int
    kind: EventKind
    seq: int
    query: Optional[Query] = None
    device: Optional[int] = None

    def sort_key(self):
        return (self.time, self.seq)


def compute_time(perf: float, tokens: int) -> int:
    """Milliseconds for a device of ``perf`` tokens/ms to process ``tokens``."""
    if not perf > 0 or not tokens > 0:
        raise DomainError(f"compute_time needs positive inputs, got perf={perf}, tokens={tokens}")
    return math.ceil(tokens / perf)


def self_compute_time(perf: float, tokens: int) -> int:
    """The buyer's baseline: running the task twice on its own device."""
    return 2 * compute_time(perf, tokens)


def time_until_idle(device: Device, now: int) -> int:
    if device.state is DeviceState.ABSENT:
        raise ContractError(f"device {device.id} is absent")
    if device.state is not DeviceState.COMPUTING_SELLER or device.busy_until is None:
        return 0
    return max(0, device.busy_until - now)


class QuerySource:
    """Draws inter-query gaps and task sizes from their own rng streams."""

    def __init__(self, query_gap: Distribution, task_size: Distribution,
                 gap_rng: np.random.Generator, token_rng: np.random.Generator):
        self.query_gap = query_gap
        self.task_size = task_size
        self.gap_rng = gap_rng
        self.token_rng = token_rng

    def gap(self) -> int:
        return max(0, int(self.query_gap.sample(self.gap_rng)))

    def tokens(self) -> int:
        return max(1, int(self.task_size.sample(self.token_rng)))


def schedule_next_query(device: Device, completed_at: int, source: QuerySource,
                        query_id: int, seq: int) -> Event:
    """The arrival event for ``device``'s next query, ``gap`` ms after its last one completed."""
    if device.is_server:
        raise ContractError(f"server {device.id} never issues queries")
    arrival = completed_at + source.gap()
    query = Query(id=query_id, buyer=device.id, tokens=source.tokens(), arrival=arrival)
    device.next_query_at = arrival
    return Event(time=arrival, kind=EventKind.QUERY_ARRIVAL, seq=seq, query=query)
