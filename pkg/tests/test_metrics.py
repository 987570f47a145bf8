import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rexmarket.metrics import (CompletionRecord, MetricsSink, RecordTable, Summary, export,
                               histogram, moving_average, read_summary, summarize)


def rec(qid, buyer, wait_ms, baseline_ms, arrival=0):
    return CompletionRecord(qid, buyer, 1000, arrival, arrival + wait_ms, baseline_ms, (90, 91))


def test_gain_example():
    # gains +10 s, -2 s, +5 s on three different devices
    records = [rec(0, 0, 10_000, 20_000), rec(1, 1, 12_000, 10_000), rec(2, 2, 5_000, 10_000)]
    s = summarize(records)
    assert s.slow_ratio == pytest.approx(1 / 3)
    assert s.avg_time_saved == pytest.approx(7.5)
    assert s.max_time_saved == pytest.approx(10.0)
    assert s.avg_time_wasted == pytest.approx(-2.0)
    assert s.max_time_wasted == pytest.approx(-2.0)
    assert s.max_net_loss == pytest.approx(-2.0)
    assert (s.devices_net_gain, s.devices_net_loss) == (2, 1)


def test_all_positive_gains():
    s = summarize([rec(0, 0, 1000, 5000), rec(1, 1, 1000, 2000)])
    assert s.slow_ratio == 0 and s.max_net_loss == 0


def test_gain_zero_is_not_slow():
    assert summarize([rec(0, 0, 4000, 4000)]).slow_ratio == 0


def test_single_record():
    s = summarize([rec(0, 0, 100_000, 1)])
    assert s.avg_wait == s.max_wait == 100.0


def test_empty():
    s = summarize([])
    assert s.empty and s.n_records == 0 and s.avg_wait == 0.0


def test_window_and_cumulative_net():
    records = [rec(0, 0, 9000, 1000)] + [rec(i, 1, 1000, 3000) for i in range(1, 4)]
    s = summarize(records, window=3)
    assert s.window == 3 and s.slow_ratio == 0.0
    assert s.max_net_loss == pytest.approx(-8.0)  # the early loss still counts
    assert summarize(records, fraction=0.25).window == 1


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 10**6), st.integers(1, 10**6)),
                min_size=1, max_size=80), st.randoms(use_true_random=False))
def test_gain_identities_and_permutation(rows, rnd):
    records = [rec(i, b, w, bl) for i, (b, w, bl) in enumerate(rows)]
    tab = RecordTable.from_records(records)
    g = tab.gain
    assert int(g[g > 0].sum()) + int(g[g < 0].sum()) == int(g.sum())
    s = summarize(records)
    assert sum(s.net_gain.values()) == pytest.approx(g.sum() / 1000.0, abs=1e-6)
    assert s.slow_ratio == np.count_nonzero(g < 0) / len(g)
    shuffled = list(records)
    rnd.shuffle(shuffled)
    t = summarize(shuffled)
    assert t.to_dict()["net_gain"] == pytest.approx(s.to_dict()["net_gain"])
    for f in ("avg_wait", "max_wait", "slow_ratio", "avg_time_saved", "max_net_loss"):
        assert getattr(t, f) == pytest.approx(getattr(s, f))


def test_sink_round_trip():
    sink = MetricsSink()
    r = rec(3, 1, 500, 800)
    sink.add(r)
    sink.add_raw(4, 2, 1000, 0, 10, 20, 5, 6)
    assert len(sink) == 2
    assert sink.records[0] == r
    assert list(sink.table().wait) == [500, 10]


def test_moving_average():
    ma = moving_average(np.arange(250, dtype=float), 100)
    assert len(ma.values) == 3 and ma.partial_last
    assert ma.values[0] == pytest.approx(49.5)
    assert ma.values[2] == pytest.approx(224.5)
    assert np.all(moving_average(np.full(300, 4.0)).values == 4.0)
    assert not moving_average(np.full(300, 4.0)).partial_last
    x = np.array([3.0, 1.0, 2.0])
    assert np.array_equal(moving_average(x, 1).values, x)
    with pytest.raises(ValueError):
        moving_average(x, 0)


@given(st.lists(st.floats(0, 1e5), min_size=1, max_size=200), st.floats(0.5, 500))
def test_histogram_conserves_counts(values, width):
    counts, edges = histogram(np.array(values), width)
    assert counts.sum() == len(values)
    assert edges[0] == 0 and edges[-1] > max(values)


def test_export_round_trip(tmp_path):
    records = [rec(0, 0, 10_000, 20_000), rec(1, 1, 12_000, 10_000), rec(2, 2, 5_000, 10_000)]
    s = summarize(records, verifications=4)
    files = export(s, tmp_path, records=records, device_perf=np.array([1.0, 2.0, 3.0]),
                   idle_perf=np.array([5.0, 6.0]), group=2, bin_width_s=5.0)
    assert read_summary(tmp_path) == s
    names = {p.name for p in files}
    assert {"summary.json", "waits.csv", "wait_histogram.csv", "moving_average.csv",
            "time_saved_vs_perf.csv", "slow_ratio_per_device.csv", "idle_seller_perf.csv"} <= names
    hist = np.loadtxt(tmp_path / "wait_histogram.csv", delimiter=",", skiprows=1)
    assert hist[:, 2].sum() == 3


def test_export_is_byte_stable(tmp_path):
    records = [rec(i, i % 3, 1000 + 37 * i, 2000) for i in range(50)]
    s = summarize(records)
    export(s, tmp_path / "a", records=records)
    export(s, tmp_path / "b", records=records)
    for name in ("summary.json", "waits.csv", "moving_average.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_reports_path_on_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export(Summary(), blocker / "sub")
