"""Compiled kernels vs. their plain fallbacks.

Times each hot kernel with numba and with the uncompiled Python / numpy path
on the same inputs, then one end-to-end simulation in a subprocess with and
without REXMARKET_DISABLE_NUMBA. Usage:

    python benchmarks/bench_kernels.py [--devices 2000] [--hours 3] [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from rexmarket import _accel, _kernels
from rexmarket.distmatch import DistSnapshot, _best_pair_numpy, _plan_numpy
from rexmarket.economy import _flatten, _loglik_numpy
from rexmarket.matching import MarketSnapshot, _seller_orders, policy_from_alias, query_order


def best_of(fn, repeat):
    fn()  # warm-up (and compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def round_inputs(rng, n_q=200, n_s=400):
    snap = MarketSnapshot(
        now=10_000, query_id=np.arange(n_q), buyer=np.arange(n_q),
        tokens=rng.integers(10_000, 5_000_000, n_q), arrival=rng.integers(0, 10_000, n_q),
        baseline=rng.integers(100_000, 2_000_000, n_q), need=np.full(n_q, 2),
        bound=np.full(n_q, -1), bound_credit=np.zeros(n_q, np.int64),
        rounds_waited=np.zeros(n_q, np.int64), random_priority=rng.random(n_q),
        seller_id=np.arange(n_s), seller_perf=rng.uniform(1, 100, n_s),
        seller_join=rng.permutation(n_s), seller_credit=np.zeros(n_s, np.int64), max_perf=1000.0)
    pol = policy_from_alias("InstantSPImproved")
    primary, fallback = _seller_orders(snap, pol.select)
    return (query_order(snap, pol), snap.tokens, snap.arrival + snap.baseline, snap.need, snap.bound,
            snap.bound_credit.astype(float), np.zeros(n_q, bool), snap.seller_id, snap.seller_perf,
            snap.seller_credit.astype(float), primary, fallback, _kernels.ON_TIME, True, -np.inf,
            1000.0, 10_000)


def dist_snapshot(rng, n_q=40, n=2000):
    stoch = rng.random(n) < 0.5
    busy = (rng.random(n) < 0.3) & ~stoch
    return DistSnapshot(0, np.arange(n_q), rng.integers(10_000, 5_000_000, n_q), rng.random(n_q),
                        np.arange(n), rng.uniform(1, 100, n),
                        np.where(busy, rng.integers(1, 100_000, n), 0), stoch)


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    rows = []

    args = round_inputs(rng)
    rows.append(("assign_round 200q x 400s",
                 best_of(lambda: _kernels.assign_round(*args), repeat),
                 best_of(lambda: _accel.py_func(_kernels.assign_round)(*args), repeat)))

    n, alpha = 256, 1 / 1.8e6
    cost = rng.uniform(0, 5e5, n)
    stoch = rng.random(n) < 0.5
    bound = cost + stoch / alpha
    order = np.argsort(bound, kind="stable")
    rows.append(("best_pair k=256 (pruned vs full)",
                 best_of(lambda: _kernels.best_pair(cost, stoch, bound, order, alpha, n), repeat),
                 best_of(lambda: _best_pair_numpy(cost, stoch, bound, order, alpha, n), repeat)))

    snap = dist_snapshot(rng)
    rows.append(("distributional plan 40q x 2000s",
                 best_of(lambda: _kernels.plan_distributional(
                     snap.tokens, np.arange(40), snap.device_id, snap.perf, snap.base_delay,
                     snap.stochastic, alpha, 16), repeat),
                 best_of(lambda: _plan_numpy(snap, alpha, 16), repeat)))

    docs = [list(rng.integers(0, 500, 200)) for _ in range(200)]
    theta = rng.dirichlet(np.ones(20), len(docs))
    phi = rng.dirichlet(np.ones(500), 20)
    flat, ptr = _flatten(docs)
    rows.append(("corpus log-likelihood 40k tokens",
                 best_of(lambda: _kernels.corpus_loglik(flat, ptr, theta, phi), repeat),
                 best_of(lambda: _loglik_numpy(flat, ptr, theta, phi), repeat)))
    return rows


_RUN = ("import sys, time\n"
        "from rexmarket import SimConfig, run, policy_from_alias\n"
        "t = time.perf_counter()\n"
        "run(SimConfig(devices=int(sys.argv[1]), horizon_ms=int(sys.argv[2]), seed=0),"
        " policy_from_alias(sys.argv[3]))\n"
        "print(time.perf_counter() - t)\n")


def end_to_end(devices, horizon_ms, matcher, disable):
    env = dict(os.environ)
    env.pop(_accel.ENV_FLAG, None)
    if disable:
        env[_accel.ENV_FLAG] = "1"
    cmd = [sys.executable, "-c", _RUN, str(devices), str(horizon_ms), matcher]
    subprocess.run(cmd, env=env, check=True, capture_output=True)  # fills the numba cache
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--devices", type=int, default=2000)
    ap.add_argument("--hours", type=float, default=3.0)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.USE_NUMBA:
        sys.exit(f"numba is disabled ({_accel.ENV_FLAG}); nothing to compare")

    print(f"{'kernel':36s} {'numba':>10s} {'fallback':>10s} {'speedup':>8s}")
    for name, fast, slow in kernel_table(args.repeat):
        print(f"{name:36s} {fast * 1e3:8.2f}ms {slow * 1e3:8.2f}ms {slow / fast:7.1f}x")

    horizon = int(args.hours * 3_600_000)
    for matcher in ("InstantSPImproved", "ScheduledMinVar"):
        fast = end_to_end(args.devices, horizon, matcher, disable=False)
        slow = end_to_end(args.devices, horizon, matcher, disable=True)
        label = f"run {matcher} {args.devices}d {args.hours:g}h"
        print(f"{label:36s} {fast:9.2f}s {slow:9.2f}s {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
