import csv
import io

import pytest

from tinc import metrics
from tinc.errors import EmptyCounts, MetricsError, ZeroCapacity
from tinc.metrics import EpochMetrics


def row(epoch=0, **overrides):
    values = {name: 0 for name in EpochMetrics.columns()}
    values.update(epoch=epoch, shards=4, admitted=100, committed=90, cross_shard_committed=9, aborted=4, rejected=2,
                  carried_over=4, elapsed_ms=1000.0, throughput=90.0, latency_mean_ms=12.5, latency_p95_ms=30.0,
                  cross_shard_ratio=0.1, failure_rate=0.06, wasted_capacity=0.2, node_uniformity=1.0,
                  tx_uniformity=0.9, avg_block_bytes=2048.0, d_total_bytes=0.0, comm_with_merge_ms=50.0,
                  comm_without_merge_ms=200.0)
    values.update(overrides)
    return EpochMetrics(**values)


def test_uniformity():
    assert metrics.uniformity([5, 5, 5, 5]) == 1.0
    assert metrics.uniformity([6, 4]) == pytest.approx(0.8)
    assert metrics.uniformity([10, 0]) == 0.0
    assert metrics.uniformity([20, 0, 0, 0]) == 0.0
    assert 0.0 <= metrics.uniformity([100, 0, 0, 0, 0, 0, 0, 0]) <= 1.0
    with pytest.raises(EmptyCounts):
        metrics.uniformity([])
    with pytest.raises(EmptyCounts):
        metrics.uniformity([0, 0])


def test_wasted_capacity():
    assert metrics.wasted_capacity(75.0, 100.0) == 0.25
    assert metrics.wasted_capacity(100.0, 100.0) == 0.0
    with pytest.raises(ZeroCapacity):
        metrics.wasted_capacity(1.0, 0.0)
    with pytest.raises(MetricsError):
        metrics.wasted_capacity(101.0, 100.0)


def test_simple_ratios():
    assert metrics.d_total(1000.0, 4, 8) == 32000.0
    assert metrics.cross_shard_ratio(3, 12) == 0.25
    assert metrics.cross_shard_ratio(3, 0) == 0.0
    assert metrics.failure_rate(5, 50) == 0.1
    assert metrics.failure_rate(5, 0) == 0.0
    assert metrics.throughput(500, 2000.0) == 250.0
    assert metrics.throughput(500, 0.0) == 0.0
    assert metrics.expected_cross_shard_ratio(4) == 0.75
    assert metrics.expected_cross_shard_ratio(1) == 0.0


def test_percentile_and_conservation():
    assert metrics.percentile([], 95) == 0.0
    assert metrics.percentile([1.0, 2.0, 3.0, 4.0, 5.0], 50) == 3.0
    assert metrics.conservation_holds(10, 6, 1, 3)
    assert not metrics.conservation_holds(10, 6, 1, 2)


def test_merging_saves_latency_per_shared_link():
    trace = [(0.1, 0, 1, "XPrepare"), (0.2, 0, 1, "XPrepare"), (0.3, 0, 2, "XPrepare"), (1.5, 0, 1, "XCommit")]
    report = metrics.merging_comparison(trace, latency=100.0, transmit=0.5, tick=1.0)
    assert report.messages == 4 and report.batches == 3
    assert report.without_merge_ms == pytest.approx(4 * 100.5)
    assert report.with_merge_ms == pytest.approx(3 * 100.0 + 4 * 0.5)
    assert 0 < report.reduction < 1
    empty = metrics.merging_comparison([])
    assert (empty.messages, empty.reduction) == (0, 0.0)


def test_merging_never_costs_more():
    trace = [(i * 0.37, i % 3, (i + 1) % 3, "ShardVote") for i in range(200)]
    report = metrics.merging_comparison(trace)
    assert report.with_merge_ms <= report.without_merge_ms


def test_csv_columns_and_extra_keys():
    text = metrics.to_csv([row(0), row(1)], extra=[("param", "rate"), ("seed", 3)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0][:3] == ["param", "seed", "epoch"]
    assert rows[0][3:] == EpochMetrics.columns()[1:]
    assert rows[1][:3] == ["rate", "3", "0"]
    assert rows[2][rows[0].index("throughput")] == "90.000000"
    assert len(rows) == 3


def test_summary_aggregates_the_run():
    rows = [row(0), row(1, committed=110, cross_shard_committed=11, carried_over=0)]
    out = metrics.summary(rows, latencies=[10.0, 20.0, 30.0])
    assert out["epochs"] == 2
    assert out["committed"] == 200
    assert out["throughput"] == 100.0
    assert out["cross_shard_ratio"] == 0.1
    assert out["failure_rate"] == 0.06
    assert out["latency_mean_ms"] == 20.0 and out["latency_median_ms"] == 20.0
    assert out["carried_over"] == 0
    assert out["comm_without_merge_ms"] == 400.0
    assert metrics.summary([])["throughput"] == 0.0
