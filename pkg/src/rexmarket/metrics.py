"""Per-query outcomes and the summary statistics built from them.

Records are kept in integer milliseconds; summaries report seconds. Wasted
time and net loss are negative numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class CompletionRecord:
    query_id: int
    buyer: int
    tokens: int
    arrival: int
    completed: int
    baseline: int
    sellers: tuple[int, int]

    @property
    def wait(self) -> int:
        return self.completed - self.arrival

    @property
    def gain(self) -> int:
        return self.baseline - self.wait


class MetricsSink:
    """Collects completion records in completion order."""

    _cols = ("query_id", "buyer", "tokens", "arrival", "completed", "baseline", "seller0", "seller1")

    def __init__(self):
        self._rows: list[tuple] = []

    def add(self, rec: CompletionRecord) -> None:
        self._rows.append((rec.query_id, rec.buyer, rec.tokens, rec.arrival, rec.completed,
                           rec.baseline, rec.sellers[0], rec.sellers[1]))

    def add_raw(self, query_id, buyer, tokens, arrival, completed, baseline, s0, s1) -> None:
        self._rows.append((query_id, buyer, tokens, arrival, completed, baseline, s0, s1))

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def records(self) -> list[CompletionRecord]:
        return [CompletionRecord(q, b, t, a, c, bl, (s0, s1)) for q, b, t, a, c, bl, s0, s1 in self._rows]

    def table(self) -> "RecordTable":
        arr = np.array(self._rows, dtype=np.int64).reshape(-1, len(self._cols))
        return RecordTable(*(arr[:, i].copy() for i in range(len(self._cols))))


@dataclass
class RecordTable:
    """Column view of completion records."""

    query_id: np.ndarray
    buyer: np.ndarray
    tokens: np.ndarray
    arrival: np.ndarray
    completed: np.ndarray
    baseline: np.ndarray
    seller0: np.ndarray
    seller1: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[CompletionRecord]) -> "RecordTable":
        sink = MetricsSink()
        for r in records:
            sink.add(r)
        return sink.table()

    def __len__(self) -> int:
        return int(self.query_id.shape[0])

    @property
    def wait(self) -> np.ndarray:
        return self.completed - self.arrival

    @property
    def gain(self) -> np.ndarray:
        return self.baseline - self.wait

    def tail(self, n: int) -> "RecordTable":
        n = max(0, min(n, len(self)))
        start = len(self) - n
        return RecordTable(*(getattr(self, f.name)[start:] for f in fields(self)))


def _as_table(records) -> RecordTable:
    if isinstance(records, RecordTable):
        return records
    if isinstance(records, MetricsSink):
        return records.table()
    return RecordTable.from_records(list(records))


@dataclass
class Summary:
    n_records: int = 0
    window: int = 0
    empty: bool = True
    avg_wait: float = 0.0
    max_wait: float = 0.0
    slow_ratio: float = 0.0
    max_time_saved: float = 0.0
    avg_time_saved: float = 0.0
    max_time_wasted: float = 0.0
    avg_time_wasted: float = 0.0
    max_net_loss: float = 0.0
    devices_net_gain: int = 0
    devices_net_loss: int = 0
    verifications: int = 0
    net_gain: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net_gain"] = {str(k): v for k, v in sorted(self.net_gain.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Summary":
        d = dict(d)
        d["net_gain"] = {int(k): float(v) for k, v in d.get("net_gain", {}).items()}
        return cls(**d)

    def table_row(self) -> dict:
        """The eight published comparison columns."""
        return {
            "AvgWait": self.avg_wait, "MaxTimeSaved": self.max_time_saved,
            "AvgTimeSaved": self.avg_time_saved, "SlowRatio": self.slow_ratio,
            "MaxWait": self.max_wait, "MaxTimeWasted": self.max_time_wasted,
            "AvgTimeWasted": self.avg_time_wasted, "MaxNetLoss": self.max_net_loss,
        }


def window_size(n: int, window: Optional[int] = None, fraction: Optional[float] = None) -> int:
    if window is not None:
        return max(0, min(n, int(window)))
    if fraction is not None:
        return min(n, int(math.ceil(n * fraction)))
    return n


def summarize(records, window: Optional[int] = None, *, fraction: Optional[float] = None,
              verifications: int = 0) -> Summary:
    """Summary over the last ``window`` records (or ``fraction`` of them).

    Wait and time saved/wasted statistics use the window; per-device net gain
    is cumulative over every record.
    """
    tab = _as_table(records)
    n = len(tab)
    if n == 0:
        return Summary(verifications=verifications)
    w = window_size(n, window, fraction)
    win = tab.tail(w)
    wait = win.wait / 1000.0
    gain = win.gain
    saved = gain[gain > 0] / 1000.0
    wasted = gain[gain < 0] / 1000.0

    buyers, inverse = np.unique(tab.buyer, return_inverse=True)
    net_ms = np.bincount(inverse, weights=tab.gain.astype(np.float64), minlength=buyers.size)
    # per-buyer sums of integer ms are exact in float64 well past any simulated day
    net = net_ms / 1000.0
    s = Summary(
        n_records=n,
        window=w,
        empty=w == 0,
        avg_wait=float(wait.mean()) if w else 0.0,
        max_wait=float(wait.max()) if w else 0.0,
        slow_ratio=float(np.count_nonzero(gain < 0) / w) if w else 0.0,
        max_time_saved=float(saved.max()) if saved.size else 0.0,
        avg_time_saved=float(saved.mean()) if saved.size else 0.0,
        max_time_wasted=float(wasted.min()) if wasted.size else 0.0,
        avg_time_wasted=float(wasted.mean()) if wasted.size else 0.0,
        max_net_loss=float(min(0.0, net.min())),
        devices_net_gain=int(np.count_nonzero(net > 0)),
        devices_net_loss=int(np.count_nonzero(net < 0)),
        verifications=verifications,
        net_gain={int(b): float(v) for b, v in zip(buyers, net)},
    )
    return s


@dataclass(frozen=True)
class MovingAverage:
    values: np.ndarray
    partial_last: bool


def moving_average(waits: Sequence[float], group: int = 100) -> MovingAverage:
    """Means over disjoint consecutive groups; a short trailing group is kept and flagged."""
    if group < 1:
        raise ValueError(f"group must be >= 1, got {group}")
    x = np.asarray(waits, dtype=np.float64)
    n_full = x.size // group
    full = x[: n_full * group].reshape(n_full, group).mean(axis=1)
    rest = x[n_full * group:]
    if rest.size:
        return MovingAverage(np.append(full, rest.mean()), True)
    return MovingAverage(full, False)


def histogram(values_s: np.ndarray, bin_width_s: float):
    values_s = np.asarray(values_s, dtype=np.float64)
    if values_s.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(1)
    n_bins = int(values_s.max() // bin_width_s) + 1
    edges = np.arange(n_bins + 1) * float(bin_width_s)
    counts, edges = np.histogram(values_s, bins=edges)
    return counts, edges


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


SUMMARY_FILE = "summary.json"


def export(summary: Summary, out_dir, *, records=None, device_perf: Optional[np.ndarray] = None,
           idle_perf: Optional[np.ndarray] = None, group: int = 100, bin_width_s: float = 10.0,
           extra: Optional[dict] = None) -> list[Path]:
    """Write the summary plus one flat table per figure into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        payload = {"summary": summary.to_dict()}
        if extra:
            payload["run"] = extra
        p = out / SUMMARY_FILE
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        written.append(p)
        if records is None:
            return written
        tab = _as_table(records)
        wait_s = tab.wait / 1000.0

        p = out / "waits.csv"
        _write_csv(p, ["query_id", "buyer", "arrival_ms", "completed_ms", "wait_s", "gain_s"],
                   zip(tab.query_id, tab.buyer, tab.arrival, tab.completed, wait_s, tab.gain / 1000.0))
        written.append(p)

        counts, edges = histogram(wait_s, bin_width_s)
        p = out / "wait_histogram.csv"
        _write_csv(p, ["bin_lo_s", "bin_hi_s", "count"], zip(edges[:-1], edges[1:], counts))
        written.append(p)

        ma = moving_average(wait_s, group)
        p = out / "moving_average.csv"
        _write_csv(p, ["group", "mean_wait_s", "partial"],
                   ((i, v, int(ma.partial_last and i == len(ma.values) - 1))
                    for i, v in enumerate(ma.values)))
        written.append(p)

        buyers, inverse = np.unique(tab.buyer, return_inverse=True)
        n_q = np.bincount(inverse, minlength=buyers.size)
        n_slow = np.bincount(inverse, weights=(tab.gain < 0).astype(np.float64), minlength=buyers.size)
        net = np.bincount(inverse, weights=tab.gain.astype(np.float64), minlength=buyers.size) / 1000.0
        perf = device_perf[buyers] if device_perf is not None else np.full(buyers.size, np.nan)

        p = out / "time_saved_vs_perf.csv"
        _write_csv(p, ["device", "perf", "queries", "net_gain_s", "mean_gain_s"],
                   zip(buyers, perf, n_q, net, net / n_q))
        written.append(p)

        p = out / "slow_ratio_per_device.csv"
        _write_csv(p, ["device", "queries", "slow", "slow_ratio"],
                   zip(buyers, n_q, n_slow.astype(np.int64), n_slow / n_q))
        written.append(p)

        if idle_perf is not None:
            p = out / "idle_seller_perf.csv"
            _write_csv(p, ["perf"], ((v,) for v in idle_perf))
            written.append(p)
        return written
    except OSError as exc:
        raise OSError(f"failed to write report to {out}: {exc}") from exc


def read_summary(out_dir) -> Summary:
    data = json.loads((Path(out_dir) / SUMMARY_FILE).read_text())
    return Summary.from_dict(data["summary"])
