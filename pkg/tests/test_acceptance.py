"""Acceptance gate: each criterion at its stated tolerance, one PASS/FAIL line each.

The desk-scale runs (2,000 devices, two servers, one simulated day, seeds 0-4)
are shared across criteria and take several minutes in total.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from rexmarket.cli import write_run
from rexmarket.config import load_config
from rexmarket.core import DAY_MS, compute_time
from rexmarket.distmatch import DistributionalPolicy, oracle_check
from rexmarket.economy import TopicModel, perplexity, validate_model, verification_probability
from rexmarket.engine import SimConfig, run
from rexmarket.matching import (ALIASES, TABLE1_MATCHERS, MarketSnapshot, MatcherPolicy, PendingQuery,
                                Reorder, Select, Seller, is_on_time, policy_from_alias,
                                run_matching_round)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
DESK = SimConfig(devices=2000, servers=2, server_perf=1000.0, horizon_ms=DAY_MS)
WINDOW = 0.25
ALPHA = 1 / 1_800_000  # one over the mean query gap


class DeskRuns:
    """Every (matcher, seed) desk run, kept as summaries plus what the checks need."""

    def __init__(self):
        self.summary = {}
        self.credit_total = {}
        self.checks = {}

    def add(self, name, seed, report):
        self.summary[name, seed] = report.summary(fraction=WINDOW)
        self.credit_total[name, seed] = int(report.credits.sum())
        self.checks[name, seed] = _structural_checks(report)

    def median(self, name, field):
        return float(np.median([getattr(self.summary[name, s], field) for s in SEEDS]))


def _structural_checks(r):
    asg = r.assignments
    a = asg[np.lexsort((asg[:, 2], asg[:, 1]))]
    same = a[1:, 1] == a[:-1, 1]
    no_overlap = bool(np.all(a[1:, 2][same] >= a[:-1, 3][same]))

    tab = r.records
    # ids are allocated when a query is scheduled, so they can exceed the issued count
    n_ids = int(max(asg[:, 0].max(initial=-1), tab.query_id.max(initial=-1))) + 1
    n_runs = np.bincount(asg[:, 0], minlength=n_ids)
    tokens = np.zeros(n_ids)
    tokens[tab.query_id] = tab.tokens
    done = np.isin(asg[:, 0], tab.query_id)
    d = asg[done]
    expected = np.ceil(tokens[d[:, 0]] / r.device_perf[d[:, 1]]).astype(np.int64)
    two_full_runs = bool(np.all(n_runs[tab.query_id] == 2) and np.all(d[:, 3] - d[:, 2] == expected)
                         and np.all(tab.seller0 != tab.seller1))

    g = tab.gain
    net = np.bincount(np.unique(tab.buyer, return_inverse=True)[1], weights=g)
    gains = int(g[g > 0].sum()) + int(g[g < 0].sum()) == int(g.sum()) == int(round(net.sum()))
    return {"no_overlap": no_overlap, "two_full_runs": two_full_runs, "gains_identity": gains,
            "conservation": r.issued == r.completed + r.pending_at_horizon}


@pytest.fixture(scope="module")
def desk():
    runs = DeskRuns()
    for name in ALIASES:
        for seed in SEEDS:
            runs.add(name, seed, run(replace(DESK, seed=seed), policy_from_alias(name)))
    return runs


@pytest.fixture(scope="module")
def desk_distributional():
    out = {}
    for seed in SEEDS:
        r = run(replace(DESK, seed=seed), DistributionalPolicy(ALPHA))
        out[seed] = (r.summary(fraction=WINDOW), int(r.credits.sum()))
    return out


def test_1_closed_form_oracle(acceptance_report):
    t0 = time.perf_counter()
    ok, results = oracle_check(n_triples=20, n_samples=1_000_000, rtol=0.005)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.rel_error)
    iid = [r for r in results if r.case.startswith("iid")]
    ok = ok and elapsed < 30 and all(r.rel_error <= 0.005 for r in iid)
    assert acceptance_report(
        "1 closed-form oracle", ok,
        f"{len(results)} cases, worst rel. error {worst.rel_error:.2e} ({worst.case}), {elapsed:.1f} s")


def test_2_zero_sum_ledger(desk, desk_distributional, acceptance_report):
    totals = list(desk.credit_total.values()) + [t for _, t in desk_distributional.values()]
    ok = all(t == 0 for t in totals)
    assert acceptance_report(
        "2 zero-sum ledger", ok,
        f"{len(totals)} desk-scale runs ({len(ALIASES) + 1} matchers x {len(SEEDS)} seeds), "
        f"max |sum| = {max(abs(t) for t in totals)}")


def test_3_verification_anchors(acceptance_report):
    anchor = verification_probability(0, 0, 3.0, 3.0)
    grid = [verification_probability(c, 0, 3.0, 3.0) for c in range(-30, 31)]
    monotone = all(a > b for a, b in zip(grid, grid[1:]))
    limit = verification_probability(10_000, 10_000, 3.0, 3.0)
    ok = abs(anchor - 1 / 6) <= 1e-9 and monotone and limit < 1e-12
    assert acceptance_report(
        "3 verification anchors", ok,
        f"prob(0,0,p,p) = {anchor:.12f}, strictly decreasing on c in [-30, 30], "
        f"prob at c = 2e4 is {limit:.1e}")


def test_4a_sp_partial_slow_ratio(desk, acceptance_report):
    lines = []
    ok = True
    for name in ("InstantSPImproved", "InstantSPReversedImproved"):
        slow = desk.median(name, "slow_ratio")
        loss = desk.median(name, "max_net_loss")
        good = slow < 1e-3 and abs(loss) < 10
        ok &= good
        lines.append(f"{name} slow_ratio {slow:.3e}, max_net_loss {loss:.1f} s")
    assert acceptance_report("4a SP slowest on-time + partial: slow_ratio < 1e-3, |loss| < 10 s",
                             ok, "; ".join(lines))


def test_4b_fifo_slow_ratio(desk, acceptance_report):
    slow = desk.median("InstantFIFO", "slow_ratio")
    assert acceptance_report("4b InstantFIFO slow_ratio > 0.1", slow > 0.1, f"median {slow:.3f}")


def test_4c_minvar_lowest_wait(desk, desk_distributional, acceptance_report):
    waits = {name: desk.median(name, "avg_wait") for name in ALIASES}
    waits["Distributional"] = float(np.median([s.avg_wait for s, _ in desk_distributional.values()]))
    best = min(waits, key=waits.get)
    table_best = min(TABLE1_MATCHERS, key=waits.get)
    ranking = ", ".join(f"{n} {w:.1f}" for n, w in sorted(waits.items(), key=lambda kv: kv[1]))
    assert acceptance_report(
        "4c ScheduledMinVar lowest avg_wait among all implemented matchers",
        best == "ScheduledMinVar",
        f"median avg_wait (s): {ranking}; best of the eight table rows alone: {table_best}")


def test_4d_greedy_beats_fifo(desk, acceptance_report):
    g, f = desk.median("InstantGreedy", "avg_wait"), desk.median("InstantFIFO", "avg_wait")
    assert acceptance_report("4d InstantGreedy avg_wait < InstantFIFO avg_wait", g < f,
                             f"{g:.1f} s vs {f:.1f} s")


def _random_market(rng):
    n_q, n_s = int(rng.integers(1, 8)), int(rng.integers(0, 10))
    perfs = np.array([1.0, 2.5, 7.0, 10.0, 33.0, 100.0, 1000.0])
    sellers = [Seller(int(i), float(rng.choice(perfs)), int(rng.integers(0, 5)))
               for i in rng.permutation(40)[:n_s]]
    now = int(rng.integers(0, 500))
    pending = [PendingQuery(100 + k, int(rng.integers(1, 5000)), int(rng.integers(0, now + 1)),
                            buyer=k, buyer_perf=float(rng.choice(perfs)),
                            random_priority=float(rng.random())) for k in range(n_q)]
    return now, pending, sellers


def test_5_property_suite(desk, acceptance_report):
    rng = np.random.default_rng(55)
    checks = {k: all(c[k] for c in desk.checks.values())
              for k in ("no_overlap", "two_full_runs", "gains_identity", "conservation")}

    minvar = all(PendingQuery(0, int(t), 0, rounds_waited=int(r)).priority == int(t) * 2 ** int(r)
                 for t, r in zip(rng.integers(1, 10**7, 2000), rng.integers(0, 40, 2000)))
    checks["minvar_priority"] = minvar

    sp = MatcherPolicy(reorder=Reorder.HARDEST_TO_FULFILL, select=Select.SP_SLOWEST_ON_TIME,
                       partial_matching=True)
    fifo = policy_from_alias("InstantFIFO")
    on_time = permutation = True
    for _ in range(2000):
        now, pending, sellers = _random_market(rng)
        max_perf = max([s.perf for s in sellers], default=1.0)
        snap = MarketSnapshot.from_objects(now, pending, sellers, max_perf=max_perf)
        by_id = {q.query_id: q for q in pending}
        by_s = {s.id: s for s in sellers}
        for d in run_matching_round(snap, sp):
            q = by_id[d.query_id]
            if now + compute_time(max_perf, q.tokens) <= q.deadline:
                on_time &= all(is_on_time(by_s[s], q, now) for s in d.sellers)
        shuffled = rng.permutation([s.perf for s in sellers]) if sellers else []
        permuted = [Seller(s.id, float(p), s.join_seq) for s, p in zip(sellers, shuffled)]
        a = run_matching_round(MarketSnapshot.from_objects(now, pending, sellers), fifo)
        b = run_matching_round(MarketSnapshot.from_objects(now, pending, permuted), fifo)
        permutation &= a == b
    checks["sp_on_time"] = on_time
    checks["fifo_perf_permutation"] = permutation
    ok = all(checks.values())
    assert acceptance_report("5 property suite", ok,
                             ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))


def test_6_byte_identical_exports(tmp_path, acceptance_report):
    cfg = load_config()
    same = []
    for name in ("InstantFIFO", "ScheduledMinVar"):
        dirs = []
        for attempt in ("a", "b"):
            r = run(replace(DESK, seed=3), policy_from_alias(name))
            d = tmp_path / attempt / name
            write_run(r, r.summary(fraction=WINDOW), d, cfg)
            dirs.append(d)
        files = sorted(p.name for p in dirs[0].iterdir())
        same.append(files == sorted(p.name for p in dirs[1].iterdir()) and
                    all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files))
    assert acceptance_report("6 determinism", all(same),
                             f"InstantFIFO and ScheduledMinVar exports identical across reruns: {same}")


def test_7_perplexity_anchors(acceptance_report):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(200):
        v = int(rng.integers(1, 200))
        docs = [list(rng.integers(0, v, rng.integers(1, 60))) for _ in range(rng.integers(1, 6))]
        model = TopicModel(np.ones((len(docs), 1)), np.full((1, v), 1.0 / v))
        worst = max(worst, abs(math.log(perplexity(docs, model)) - math.log(v)))
    eps = 0.5
    inside = validate_model(TopicModel(np.ones((1, 1)), np.array([[0.75, 0.5]])), eps)
    edge = validate_model(TopicModel(np.ones((1, 1)), np.array([[1.0, 0.5]])), eps)
    short = validate_model(TopicModel(np.ones((1, 1)), np.array([[0.5, 0.4]])), 0.01)
    ok = worst <= 1e-9 and inside and not edge and not short
    assert acceptance_report(
        "7 perplexity anchors", ok,
        f"uniform K=1 max |log pp - log V| = {worst:.1e}; validate_model at 1+eps/2 {inside}, "
        f"at exactly 1+eps {edge}, row sum 0.9 {short}")


def test_8_bad_actor_drift(acceptance_report):
    rows = []
    ok = True
    for seed in SEEDS:
        cfg = replace(DESK, seed=seed, bad_actor_fraction=0.05)
        r = run(cfg, policy_from_alias("InstantGreedy"))
        honest = ~r.bad_actor & ~r.is_server
        bad_mean, honest_mean = r.credits[r.bad_actor].mean(), r.credits[honest].mean()
        ok &= bad_mean < 0 and bad_mean < honest_mean
        rows.append(f"{bad_mean:.2f}/{honest_mean:.2f}")
    assert acceptance_report("8 bad-actor drift", ok,
                             f"bad/honest mean credit per seed: {', '.join(rows)}")

