"""Command-line driver: matcher x seed sweeps with per-run reports and a comparison table."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .core import DomainError, InvariantError
from .distmatch import oracle_check
from .engine import SimulationReport, run
from .metrics import Summary, export

log = logging.getLogger("rexmarket")

COMPARISON_FILE = "comparison.csv"
TABLE_COLUMNS = ("AvgWait", "MaxTimeSaved", "AvgTimeSaved", "SlowRatio", "MaxWait",
                 "MaxTimeWasted", "AvgTimeWasted", "MaxNetLoss")
EXTRA_COLUMNS = ("completed", "pending_at_horizon", "verifications")


def run_dir(out: Path, matcher_label: str, seed: int) -> Path:
    return Path(out) / matcher_label / f"seed_{seed}"


def run_info(report: SimulationReport) -> dict:
    honest = ~report.bad_actor & ~report.is_server
    bad = report.bad_actor
    return {
        "matcher": report.matcher,
        "seed": report.seed,
        "horizon_ms": report.horizon_ms,
        "issued": report.issued,
        "completed": report.completed,
        "pending_at_horizon": report.pending_at_horizon,
        "matching_rounds": report.rounds,
        "verifications": report.verifications,
        "verification_prob_clamped": report.clamped,
        "flagged": report.flagged,
        "credit_total": int(report.credits.sum()),
        "honest_mean_credit": float(report.credits[honest].mean()) if honest.any() else 0.0,
        "bad_actor_mean_credit": float(report.credits[bad].mean()) if bad.any() else 0.0,
    }


def write_run(report: SimulationReport, summary: Summary, out_dir: Path,
              cfg: ExperimentConfig) -> list[Path]:
    return export(summary, out_dir, records=report.records, device_perf=report.device_perf,
                  idle_perf=report.idle_perf_samples, group=cfg.metrics.moving_average_group,
                  bin_width_s=cfg.metrics.histogram_bin_s, extra=run_info(report))


def _comparison_rows(results: list[tuple[str, int, Summary, SimulationReport]]) -> list[list]:
    rows = []
    by_matcher: dict[str, list] = {}
    for label, seed, summ, rep in results:
        vals = [*summ.table_row().values(), rep.completed, rep.pending_at_horizon, rep.verifications]
        rows.append([label, seed, *vals])
        by_matcher.setdefault(label, []).append(vals)
    for label, vals in by_matcher.items():
        med = np.median(np.asarray(vals, dtype=np.float64), axis=0)
        rows.append([label, "median", *(float(v) for v in med)])
    return rows


def write_comparison(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["matcher", "seed", *TABLE_COLUMNS, *EXTRA_COLUMNS])
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def run_experiment(cfg: ExperimentConfig, *, check: bool = False) -> int:
    """Run every (matcher, seed) pair; returns a process exit status."""
    if check:
        t0 = time.perf_counter()
        ok, results = oracle_check()
        worst = max(results, key=lambda r: r.rel_error)
        log.info("oracle check: %d cases, worst rel. error %.2e (%s), %.1f s",
                 len(results), worst.rel_error, worst.case, time.perf_counter() - t0)
        if not ok:
            log.error("closed-form expectations disagree with Monte Carlo")
            return 3

    out = Path(cfg.out)
    results = []
    for matcher in cfg.matchers:
        for seed in cfg.seeds:
            t0 = time.perf_counter()
            try:
                report = run(cfg.sim_for(seed), matcher)
            except InvariantError as exc:
                log.error("%s seed %d: invariant violated: %s", matcher.label, seed, exc)
                return 2
            summ = report.summary(fraction=cfg.metrics.window_fraction)
            write_run(report, summ, run_dir(out, matcher.label, seed), cfg)
            log.info("%s seed %d: %d queries, avg wait %.2f s, slow ratio %.3g (%.1f s)",
                     matcher.label, seed, report.completed, summ.avg_wait, summ.slow_ratio,
                     time.perf_counter() - t0)
            results.append((matcher.label, seed, summ, report))
    write_comparison(out / COMPARISON_FILE, _comparison_rows(results))
    log.info("wrote %s", out / COMPARISON_FILE)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rexmarket",
                                description="Simulate the compute exchange under one or more matchers.")
    p.add_argument("--config", type=Path, help="TOML config (default: shipped desk-scale config)")
    p.add_argument("--matcher", action="append", metavar="NAME",
                   help="matcher alias, custom policy name or 'Distributional'; repeatable")
    p.add_argument("--seed", action="append", type=int, metavar="N", help="repeatable")
    p.add_argument("--devices", type=int, metavar="N")
    p.add_argument("--horizon", type=int, metavar="MS", help="simulated horizon in ms")
    p.add_argument("--out", type=Path, metavar="DIR")
    p.add_argument("--check", action="store_true",
                   help="verify the closed-form expectations by Monte Carlo first")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, matchers=args.matcher, seeds=args.seed,
                          devices=args.devices, horizon_ms=args.horizon, out=args.out)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return run_experiment(cfg, check=args.check)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
