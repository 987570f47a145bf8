import dataclasses

import numpy as np
import pytest

from rexmarket.core import DAY_MS, HOUR_MS, InvariantError, Uniform
from rexmarket.distmatch import DistributionalPolicy
from rexmarket.engine import DEFAULT_DISTRIBUTIONS, SimConfig, Simulation, run
from rexmarket.matching import TABLE1_MATCHERS, policy_from_alias


def one_buyer_config(tokens=2_000_000):
    dists = dataclasses.replace(DEFAULT_DISTRIBUTIONS, query_gap=Uniform(0.0, 0.0),
                                task_size=Uniform(tokens, tokens), perf=Uniform(5.0, 5.0))
    return SimConfig(devices=1, servers=2, distributions=dists, horizon_ms=10_000, seed=3)


@pytest.mark.parametrize("name", ["InstantFIFO", "InstantGreedy"])
def test_single_buyer_goes_to_both_servers(name):
    r = run(one_buyer_config(), policy_from_alias(name))
    assert r.records.wait[0] == 2000  # ceil(2e6 / 1000)
    assert {int(r.records.seller0[0]), int(r.records.seller1[0])} == {1, 2}


@pytest.mark.parametrize("name", ["InstantSP", "InstantSPImproved"])
def test_single_buyer_slowest_on_time_includes_itself(name):
    # the buyer's own run takes exactly half its baseline, so it is the slowest on-time seller
    cfg = dataclasses.replace(one_buyer_config(), horizon_ms=500_000)
    r = run(cfg, policy_from_alias(name))
    assert r.records.wait[0] == 400_000
    assert {int(r.records.seller0[0]), int(r.records.seller1[0])} == {0, 1}
    assert r.records.gain[0] == 400_000


def test_no_devices():
    r = run(SimConfig(devices=0, horizon_ms=DAY_MS), policy_from_alias("InstantFIFO"))
    assert r.issued == r.completed == 0 and len(r.records) == 0
    assert r.summary().empty


def test_determinism(small_config):
    pol = policy_from_alias("SelectiveProbablisticScheduledGreedy")
    a, b = run(small_config, pol), run(small_config, pol)
    for f in ("wait", "gain", "buyer", "seller0", "seller1"):
        assert np.array_equal(getattr(a.records, f), getattr(b.records, f))
    assert np.array_equal(a.credits, b.credits)
    assert np.array_equal(a.assignments, b.assignments)


def test_arrival_stream_does_not_depend_on_policy(small_config):
    a = run(small_config, policy_from_alias("InstantFIFO"))
    b = run(small_config, policy_from_alias("InstantGreedy"))
    assert np.array_equal(a.device_perf, b.device_perf)


def _check_run(r):
    # no device in two overlapping assignments
    asg = r.assignments
    for dev in np.unique(asg[:, 1]):
        rows = asg[asg[:, 1] == dev]
        rows = rows[np.argsort(rows[:, 2], kind="stable")]
        assert np.all(rows[1:, 2] >= rows[:-1, 3])
    # every completed query has two full runs on distinct sellers
    tab = r.records
    per_query = {}
    for q, s, start, fin in asg:
        per_query.setdefault(int(q), []).append((int(s), int(start), int(fin)))
    for k in range(len(tab)):
        runs = per_query[int(tab.query_id[k])]
        assert len(runs) == 2 and runs[0][0] != runs[1][0]
        for s, start, fin in runs:
            assert fin - start == int(np.ceil(tab.tokens[k] / r.device_perf[s]))
            assert fin <= tab.completed[k]
        assert max(f for _, _, f in runs) == tab.completed[k]
    assert np.all(tab.wait >= 0)
    # consecutive queries of one buyer never overlap
    for b in np.unique(tab.buyer):
        m = tab.buyer == b
        arr, comp = tab.arrival[m], tab.completed[m]
        assert np.all(arr[1:] >= comp[:-1])
    assert r.issued == r.completed + r.pending_at_horizon
    assert int(r.credits.sum()) == 0


@pytest.mark.parametrize("name", TABLE1_MATCHERS)
def test_run_invariants(small_config, name):
    _check_run(run(small_config, policy_from_alias(name)))


def test_distributional_run_invariants(small_config):
    _check_run(run(small_config, DistributionalPolicy(alpha=1 / 1.8e6)))


def test_scheduled_matcher_only_matches_on_ticks(small_config):
    pol = dataclasses.replace(policy_from_alias("ScheduledSP"), period_ms=5000)
    r = run(small_config, pol)
    assert np.all(r.assignments[:, 2] % 5000 == 0)


def test_bad_actors_lose_credit():
    cfg = SimConfig(devices=200, horizon_ms=6 * HOUR_MS, seed=2, bad_actor_fraction=0.1)
    r = run(cfg, policy_from_alias("InstantGreedy"))
    assert r.credits[r.bad_actor].mean() < r.credits[~r.bad_actor].mean()
    assert r.credits[r.bad_actor].mean() < 0


def test_double_booking_is_fatal(small_config):
    sim = Simulation(small_config, policy_from_alias("InstantFIFO"))
    sim.computing[sim.n_users] = True
    with pytest.raises(InvariantError):
        sim._start(0, sim.n_users)


def test_device_view(small_config):
    sim = Simulation(small_config, policy_from_alias("InstantFIFO"))
    server = sim.device(sim.n_users)
    assert server.is_server and server.next_query_at is None


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(devices=-1)
    with pytest.raises(ValueError):
        SimConfig(horizon_ms=0)
    with pytest.raises(ValueError):
        SimConfig(bad_actor_fraction=2.0)
