"""Simulator and matching policies for a peer-to-peer computational resource exchange."""
from .core import (DAY_MS, HOUR_MS, ContractError, Device, DeviceState, Distributions, DomainError,
                   Event, EventKind, Exponential, InvariantError, Query, Uniform, compute_time,
                   schedule_next_query, time_until_idle)
from .config import ExperimentConfig, load_config, parse_config
from .distmatch import DistributionalPolicy, expected_max, expected_max_wait, match_distributional
from .engine import SimConfig, SimulationReport, run
from .matching import MatcherPolicy, policy_from_alias, run_matching_round
from .metrics import CompletionRecord, Summary, moving_average, summarize

__version__ = "0.1.0"
