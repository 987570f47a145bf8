"""Credits, secondary verification and topic-model evaluation.

Results are abstract: a seller's output is represented by its perplexity and a
validity flag. ``QualityModel`` produces those values inside the simulator so
the credit mechanism can be exercised without training any model.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _accel, _kernels
from .core import DomainError


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def raw_verification_probability(c1: float, c2: float, p1: float, p2: float) -> float:
    if not (p1 > 0 and p2 > 0):
        raise DomainError(f"perplexities must be positive, got {p1}, {p2}")
    similarity = min(p1, p2) / max(p1, p2)
    return 1.0 - (_sigmoid(c1 + c2) + 2.0 * similarity) / 3.0


def verification_probability(c1: float, c2: float, p1: float, p2: float) -> float:
    """Probability that a pair of results is re-checked server-side.

    Low combined credit and dissimilar perplexities both push it up. Clamped to
    [0, 1]; see ``raw_verification_probability`` for the unclamped value.
    """
    return min(1.0, max(0.0, raw_verification_probability(c1, c2, p1, p2)))


class Verdict(enum.Enum):
    VERIFY = "verify"
    ACCEPT = "accept"


def verification_draw(prob: float, rng: np.random.Generator) -> Verdict:
    if not 0.0 <= prob <= 1.0:
        raise DomainError(f"probability must be in [0, 1], got {prob}")
    return Verdict.VERIFY if rng.random() < prob else Verdict.ACCEPT


@dataclass(frozen=True)
class ResultQuality:
    perplexity: float
    valid: bool = True

    def __post_init__(self):
        if not self.perplexity > 0:
            raise DomainError(f"perplexity must be positive, got {self.perplexity}")


@dataclass(frozen=True)
class Settlement:
    winner: Optional[int]
    loser: Optional[int]
    flagged: bool = False


class CreditLedger:
    """Integer credit per account. Every transfer moves exactly one unit."""

    def __init__(self, n_accounts: int):
        self.balance = np.zeros(n_accounts, dtype=np.int64)
        self.transfers = 0

    def __getitem__(self, account: int) -> int:
        return int(self.balance[account])

    def __len__(self) -> int:
        return self.balance.shape[0]

    def transfer(self, src: int, dst: int, amount: int = 1) -> None:
        self.balance[src] -= amount
        self.balance[dst] += amount
        self.transfers += 1

    def total(self) -> int:
        return int(self.balance.sum())


def settle_query(ledger: CreditLedger, seller1: int, seller2: int,
                 q1: ResultQuality, q2: ResultQuality) -> Settlement:
    """Move one credit from the worse result's producer to the better one's.

    Lower perplexity wins. A valid result beats an invalid one; equal
    perplexities transfer nothing; two invalid results transfer nothing and
    flag the query.
    """
    if not q1.valid and not q2.valid:
        return Settlement(None, None, flagged=True)
    if q1.valid != q2.valid:
        winner, loser = (seller1, seller2) if q1.valid else (seller2, seller1)
    elif q1.perplexity < q2.perplexity:
        winner, loser = seller1, seller2
    elif q2.perplexity < q1.perplexity:
        winner, loser = seller2, seller1
    else:
        return Settlement(None, None)
    ledger.transfer(loser, winner)
    return Settlement(winner, loser)


@dataclass(frozen=True)
class QualityModel:
    """Simulated result quality.

    Honest perplexity is ``base * (1 + |N(0, noise)|)``; bad actors multiply by a
    further ``1 + penalty`` and return an invalid model with ``invalid_rate``.
    """

    base_perplexity: float = 1000.0
    noise: float = 0.05
    bad_actor_penalty: float = 0.5
    bad_actor_invalid_rate: float = 0.0

    def draw(self, rng: np.random.Generator, bad_actor: bool) -> ResultQuality:
        p = self.base_perplexity * (1.0 + abs(rng.normal(0.0, self.noise)))
        valid = True
        if bad_actor:
            p *= 1.0 + self.bad_actor_penalty
            if self.bad_actor_invalid_rate > 0:
                valid = bool(rng.random() >= self.bad_actor_invalid_rate)
        return ResultQuality(p, valid)


# --
# Topic models


@dataclass
class TopicModel:
    theta: np.ndarray  # documents x topics
    phi: np.ndarray  # topics x vocabulary

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.theta.ndim != 2 or self.phi.ndim != 2:
            raise DomainError("theta and phi must be 2-d")
        if self.theta.shape[1] != self.phi.shape[0]:
            raise DomainError(
                f"topic count mismatch: theta has {self.theta.shape[1]}, phi has {self.phi.shape[0]}")

    @property
    def vocab_size(self) -> int:
        return self.phi.shape[1]


def validate_model(model: TopicModel, epsilon: float) -> bool:
    """Every row of theta and phi sums to one within ``epsilon`` (strictly)."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    rows_phi = np.abs(1.0 - model.phi.sum(axis=1))
    rows_theta = np.abs(1.0 - model.theta.sum(axis=1))
    return bool(np.all(rows_phi < epsilon) and np.all(rows_theta < epsilon))


def _flatten(docs: Sequence[Sequence[int]]):
    lengths = np.fromiter((len(d) for d in docs), dtype=np.int64, count=len(docs))
    ptr = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum(lengths, out=ptr[1:])
    flat = np.fromiter((t for d in docs for t in d), dtype=np.int64, count=int(ptr[-1]))
    return flat, ptr


def _loglik_numpy(flat, ptr, theta, phi) -> float:
    doc_of_token = np.repeat(np.arange(ptr.shape[0] - 1), np.diff(ptr))
    probs = np.einsum("nk,kn->n", theta[doc_of_token], phi[:, flat])
    if np.any(probs <= 0):
        return -math.inf
    return float(np.log(probs).sum())


def corpus_log_likelihood(docs: Sequence[Sequence[int]], model: TopicModel) -> float:
    if len(docs) != model.theta.shape[0]:
        raise DomainError(f"{len(docs)} documents but theta has {model.theta.shape[0]} rows")
    flat, ptr = _flatten(docs)
    if flat.size and (flat.min() < 0 or flat.max() >= model.vocab_size):
        raise DomainError(f"token id outside vocabulary [0, {model.vocab_size})")
    if _accel.USE_NUMBA:
        return float(_kernels.corpus_loglik(flat, ptr, model.theta, model.phi))
    return _loglik_numpy(flat, ptr, model.theta, model.phi)


def perplexity(docs: Sequence[Sequence[int]], model: TopicModel) -> float:
    """exp(-loglik / token count). A token with zero probability gives ``inf``."""
    n_tokens = sum(len(d) for d in docs)
    if n_tokens == 0:
        raise DomainError("perplexity of an empty corpus is undefined")
    ll = corpus_log_likelihood(docs, model)
    if ll == -math.inf:
        return math.inf
    return math.exp(-ll / n_tokens)


def read_corpus(path: str | Path) -> list[list[int]]:
    """One document per line, whitespace-separated integer token ids."""
    with open(path) as fh:
        return [[int(t) for t in line.split()] for line in fh if line.strip()]


def write_corpus(path: str | Path, docs: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for d in docs:
            fh.write(" ".join(str(int(t)) for t in d) + "\n")
