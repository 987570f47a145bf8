"""Experiment configuration: TOML file plus command-line overrides.

Every section and key is optional; missing values fall back to the shipped
defaults in ``data/default.toml``. Unknown keys are rejected with their full
dotted path so typos never silently change an experiment.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import DomainError, Distributions, distribution_from_dict
from .distmatch import DEFAULT_TOP_K, DistributionalPolicy
from .economy import QualityModel
from .engine import SimConfig
from .matching import (DEFAULT_PERIOD_MS, DEFAULT_SKIP_PROBABILITY, MatcherPolicy, Reorder,
                       Select, Trigger, is_alias, policy_from_alias)

Matcher = Union[MatcherPolicy, DistributionalPolicy]

DISTRIBUTIONAL = "Distributional"


class ConfigError(DomainError):
    """Invalid configuration; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


_SCHEMA: dict[str, Any] = {
    "market": {"devices", "servers", "server_perf", "horizon_ms", "idle_sample_period_ms"},
    "distributions": {"query_gap", "perf", "task_size"},
    "run": {"matchers", "seeds", "out"},
    "matching": {"period_ms", "skip_probability", "custom"},
    "distributional": {"alpha", "top_k"},
    "metrics": {"window_fraction", "moving_average_group", "histogram_bin_s"},
    "economy": {"epsilon", "base_perplexity", "quality_noise", "bad_actor_fraction",
                "bad_actor_penalty", "bad_actor_invalid_rate", "credit_threshold"},
}
_CUSTOM_KEYS = {"name", "trigger", "reorder", "select", "partial_matching", "skip_probability",
                "period_ms", "reverse_order"}


@dataclass(frozen=True)
class MetricsConfig:
    window_fraction: float = 0.25
    moving_average_group: int = 100
    histogram_bin_s: float = 10.0


@dataclass(frozen=True)
class EconomyConfig:
    epsilon: float = 1e-6
    base_perplexity: float = 1000.0
    quality_noise: float = 0.05
    bad_actor_fraction: float = 0.0
    bad_actor_penalty: float = 0.5
    bad_actor_invalid_rate: float = 0.0
    credit_threshold: float = -math.inf

    def quality(self) -> QualityModel:
        return QualityModel(self.base_perplexity, self.quality_noise, self.bad_actor_penalty,
                            self.bad_actor_invalid_rate)


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig
    matchers: tuple[Matcher, ...]
    seeds: tuple[int, ...]
    out: Path = Path("runs")
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    economy: EconomyConfig = field(default_factory=EconomyConfig)

    def sim_for(self, seed: int) -> SimConfig:
        return replace(self.sim, seed=seed)


def _check_keys(table: dict, allowed: set, path: str) -> None:
    for key in table:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(where, f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _table(raw: dict, key: str) -> dict:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(key, "expected a table")
    return value


def _num(table: dict, key: str, path: str, default, cast=float, positive=False, nonneg=False):
    if key not in table:
        return default
    value = table[key]
    where = f"{path}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    if cast is int and float(value) != int(value):
        raise ConfigError(where, f"expected an integer, got {value!r}")
    value = cast(value)
    if positive and not value > 0:
        raise ConfigError(where, f"must be positive, got {value}")
    if nonneg and value < 0:
        raise ConfigError(where, f"must be non-negative, got {value}")
    return value


def _unit(table: dict, key: str, path: str, default: float) -> float:
    value = _num(table, key, path, default)
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{path}.{key}", f"must be in [0, 1], got {value}")
    return value


def _enum(cls, value, path):
    try:
        return cls(str(value).lower())
    except ValueError:
        raise ConfigError(path, f"expected one of {[m.value for m in cls]}, got {value!r}") from None


def _distributions(table: dict) -> Distributions:
    _check_keys(table, _SCHEMA["distributions"], "distributions")
    base = SimConfig().distributions
    parts = {}
    for name in _SCHEMA["distributions"]:
        if name not in table:
            parts[name] = getattr(base, name)
            continue
        try:
            parts[name] = distribution_from_dict(table[name])
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"distributions.{name}", str(exc)) from None
    try:
        return Distributions(**parts)
    except DomainError as exc:
        raise ConfigError("distributions", str(exc)) from None


def _custom_policy(entry: dict, idx: int, period_ms: int) -> MatcherPolicy:
    path = f"matching.custom[{idx}]"
    if not isinstance(entry, dict):
        raise ConfigError(path, "expected a table")
    _check_keys(entry, _CUSTOM_KEYS, path)
    if "name" not in entry:
        raise ConfigError(f"{path}.name", "required")
    try:
        return MatcherPolicy(
            trigger=_enum(Trigger, entry.get("trigger", "instant"), f"{path}.trigger"),
            reorder=_enum(Reorder, entry.get("reorder", "fifo"), f"{path}.reorder"),
            select=_enum(Select, entry.get("select", "fifo"), f"{path}.select"),
            partial_matching=bool(entry.get("partial_matching", False)),
            skip_probability=_unit(entry, "skip_probability", path, 0.0),
            period_ms=_num(entry, "period_ms", path, period_ms, int, positive=True),
            reverse_order=bool(entry.get("reverse_order", False)),
            name=str(entry["name"]),
        )
    except DomainError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from None


def resolve_alpha(value, distributions: Distributions, path: str = "distributional.alpha") -> float:
    """``"auto"`` means one over the mean query gap, in 1/ms."""
    if isinstance(value, str):
        if value.lower() != "auto":
            raise ConfigError(path, f"expected a positive number or 'auto', got {value!r}")
        mean = distributions.query_gap.mean
        if not mean > 0:
            raise ConfigError(path, "'auto' needs a query gap distribution with positive mean")
        return 1.0 / mean
    return _num({"alpha": value}, "alpha", path.rsplit(".", 1)[0], None, positive=True)


def resolve_matchers(names, customs: dict[str, MatcherPolicy], *, period_ms: int,
                     skip_probability: float, credit_floor: float, alpha: float,
                     top_k: Optional[int], path: str = "run.matchers") -> tuple[Matcher, ...]:
    out = []
    for i, name in enumerate(names):
        where = f"{path}[{i}]"
        if not isinstance(name, str):
            raise ConfigError(where, f"expected a matcher name, got {name!r}")
        if name in customs:
            policy = customs[name]
        elif is_alias(name):
            policy = policy_from_alias(name, period_ms, skip_probability)
        elif name.lower() == DISTRIBUTIONAL.lower():
            out.append(DistributionalPolicy(alpha, top_k))
            continue
        else:
            raise ConfigError(where, f"unknown matcher {name!r}")
        out.append(replace(policy, credit_floor=credit_floor))
    return tuple(out)


def default_config_path() -> Path:
    return Path(str(resources.files("rexmarket") / "data" / "default.toml"))


def load_toml(path) -> dict:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(p), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(p), f"invalid TOML: {exc}") from None


def parse_config(raw: Optional[dict] = None, *, matchers=None, seeds=None, devices=None,
                 horizon_ms=None, out=None) -> ExperimentConfig:
    """Validate a parsed TOML document; keyword arguments override file values."""
    raw = {} if raw is None else raw
    _check_keys(raw, set(_SCHEMA), "")
    for name, allowed in _SCHEMA.items():
        _check_keys(_table(raw, name), allowed, name)

    mk = _table(raw, "market")
    base = SimConfig()
    dists = _distributions(_table(raw, "distributions"))
    mt = _table(raw, "matching")
    period = _num(mt, "period_ms", "matching", DEFAULT_PERIOD_MS, int, positive=True)
    skip = _unit(mt, "skip_probability", "matching", DEFAULT_SKIP_PROBABILITY)
    custom_list = mt.get("custom", [])
    if not isinstance(custom_list, list):
        raise ConfigError("matching.custom", "expected an array of tables")
    customs = {}
    for i, entry in enumerate(custom_list):
        pol = _custom_policy(entry, i, period)
        customs[pol.name] = pol

    ec = _table(raw, "economy")
    economy = EconomyConfig(
        epsilon=_num(ec, "epsilon", "economy", 1e-6, positive=True),
        base_perplexity=_num(ec, "base_perplexity", "economy", 1000.0, positive=True),
        quality_noise=_num(ec, "quality_noise", "economy", 0.05, nonneg=True),
        bad_actor_fraction=_unit(ec, "bad_actor_fraction", "economy", 0.0),
        bad_actor_penalty=_num(ec, "bad_actor_penalty", "economy", 0.5, nonneg=True),
        bad_actor_invalid_rate=_unit(ec, "bad_actor_invalid_rate", "economy", 0.0),
        credit_threshold=_num(ec, "credit_threshold", "economy", -math.inf),
    )

    mc = _table(raw, "metrics")
    metrics = MetricsConfig(
        window_fraction=_unit(mc, "window_fraction", "metrics", 0.25),
        moving_average_group=_num(mc, "moving_average_group", "metrics", 100, int, positive=True),
        histogram_bin_s=_num(mc, "histogram_bin_s", "metrics", 10.0, positive=True),
    )

    dt = _table(raw, "distributional")
    alpha = resolve_alpha(dt.get("alpha", "auto"), dists)
    top_k = dt.get("top_k", DEFAULT_TOP_K)
    if top_k is not None and top_k != "all":
        top_k = _num(dt, "top_k", "distributional", DEFAULT_TOP_K, int, positive=True)
        if top_k < 2:
            raise ConfigError("distributional.top_k", f"must be >= 2 or 'all', got {top_k}")
    else:
        top_k = None

    rt = _table(raw, "run")
    names = matchers if matchers else rt.get("matchers", ["InstantFIFO"])
    seed_list = seeds if seeds else rt.get("seeds", [0])
    if not isinstance(names, (list, tuple)) or not names:
        raise ConfigError("run.matchers", "expected a non-empty list of names")
    if not isinstance(seed_list, (list, tuple)) or not seed_list:
        raise ConfigError("run.seeds", "expected a non-empty list of integers")
    for i, s in enumerate(seed_list):
        if isinstance(s, bool) or not isinstance(s, int) or s < 0:
            raise ConfigError(f"run.seeds[{i}]", f"expected a non-negative integer, got {s!r}")

    try:
        sim = SimConfig(
            devices=devices if devices is not None else
            _num(mk, "devices", "market", base.devices, int, nonneg=True),
            servers=_num(mk, "servers", "market", base.servers, int, nonneg=True),
            server_perf=_num(mk, "server_perf", "market", base.server_perf, positive=True),
            distributions=dists,
            horizon_ms=horizon_ms if horizon_ms is not None else
            _num(mk, "horizon_ms", "market", base.horizon_ms, int, positive=True),
            seed=int(seed_list[0]),
            quality=economy.quality(),
            bad_actor_fraction=economy.bad_actor_fraction,
            idle_sample_period_ms=_num(mk, "idle_sample_period_ms", "market",
                                       base.idle_sample_period_ms, int, positive=True),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("market", str(exc)) from None

    policies = resolve_matchers(names, customs, period_ms=period, skip_probability=skip,
                                credit_floor=economy.credit_threshold, alpha=alpha, top_k=top_k)
    return ExperimentConfig(
        sim=sim, matchers=policies, seeds=tuple(int(s) for s in seed_list),
        out=Path(out if out is not None else rt.get("out", "runs")),
        metrics=metrics, economy=economy,
    )


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Parse ``path`` (the shipped defaults when None) and apply overrides."""
    raw = load_toml(default_config_path() if path is None else path)
    return parse_config(raw, **overrides)

