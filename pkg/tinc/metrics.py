# -*- coding: utf-8 -*-
"""Evaluation metrics.

Every function here is a closed formula over counts the engine collects; the
per-epoch :class:`EpochMetrics` row is what ends up in ``metrics.csv``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import EmptyCounts, MetricsError, ZeroCapacity

__log__ = logging.getLogger(__name__)


def uniformity(counts: Sequence[float]) -> float:
    """1 - sum |x_i - total / C| / total, clamped to [0, 1]."""
    if len(counts) == 0:
        raise EmptyCounts("uniformity over zero shards")
    total = float(sum(counts))
    if total <= 0:
        raise EmptyCounts("uniformity over an empty distribution")
    mean = total / len(counts)
    raw = 1 - sum(abs(x - mean) for x in counts) / total
    if raw < 0 or raw > 1:
        __log__.info(f"uniformity {raw:.4f} outside [0, 1], clamped")
    return min(1.0, max(0.0, raw))


def wasted_capacity(processed: float, capacity: float) -> float:
    if capacity <= 0:
        raise ZeroCapacity("maximum capacity must be positive")
    if processed < 0 or processed > capacity:
        raise MetricsError(f"processed {processed} outside [0, {capacity}]")
    return 1 - processed / capacity


def d_total(avg_block_bytes: float, shards: int, members: int) -> float:
    return avg_block_bytes * shards * members


def cross_shard_ratio(cross: int, committed: int) -> float:
    return cross / committed if committed else 0.0


def failure_rate(failed: int, admitted: int) -> float:
    return min(1.0, failed / admitted) if admitted else 0.0


def throughput(committed: int, elapsed_ms: float) -> float:
    """Committed transactions per simulated second."""
    return committed / (elapsed_ms / 1000.0) if elapsed_ms > 0 else 0.0


def expected_cross_shard_ratio(shards: int) -> float:
    """Cross-shard share of uniformly placed two-party transfers."""
    return 1 - 1 / shards


def percentile(values: Sequence[float], q: float) -> float:
    if len(values) == 0:
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=float), q))


def conservation_holds(admitted: int, committed: int, rejected: int, carried: int) -> bool:
    return admitted == committed + rejected + carried


class MergingReport(NamedTuple):
    with_merge_ms: float
    without_merge_ms: float
    messages: int
    batches: int

    @property
    def reduction(self) -> float:
        if self.without_merge_ms <= 0:
            return 0.0
        return 1 - self.with_merge_ms / self.without_merge_ms


def merging_comparison(trace: Iterable[Tuple[float, int, int, str]], *, latency: float = 100.0,
                       transmit: float = 0.04, tick: float = 1.0) -> MergingReport:
    """Communication time of a cross-shard message schedule with and without batching.

    ``trace`` rows are ``(time, source shard, destination shard, kind)``.
    Unmerged, every message pays the link latency; merged, messages sharing a
    (source, destination, tick) pay it once. Transmission time is paid per
    message either way.
    """
    messages = 0
    batches = set()
    for t, src, dst, _kind in trace:
        messages += 1
        batches.add((src, dst, math.floor(t / tick)))
    without = messages * (latency + transmit)
    with_ = len(batches) * latency + messages * transmit
    return MergingReport(with_, without, messages, len(batches))


@dataclass
class EpochMetrics:
    """One row of ``metrics.csv``; field order is the column order."""

    epoch: int
    shards: int
    admitted: int
    committed: int
    cross_shard_committed: int
    aborted: int
    rejected: int
    carried_over: int
    elapsed_ms: float
    throughput: float
    latency_mean_ms: float
    latency_p95_ms: float
    cross_shard_ratio: float
    failure_rate: float
    wasted_capacity: float
    node_uniformity: float
    tx_uniformity: float
    avg_block_bytes: float
    d_total_bytes: float
    comm_with_merge_ms: float
    comm_without_merge_ms: float

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_row(self) -> List[str]:
        return [_fmt(getattr(self, name)) for name in self.columns()]

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def to_csv(rows: Iterable[EpochMetrics], *, extra: Sequence[Tuple[str, object]] = ()) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([k for k, _ in extra] + EpochMetrics.columns())
    for row in rows:
        writer.writerow([_fmt(v) for _, v in extra] + row.to_row())
    return buf.getvalue()


def summary(rows: Sequence[EpochMetrics], latencies: Sequence[float] = ()) -> dict:
    """End-of-run aggregate; ``latencies`` are all per-transaction latencies of the run."""
    committed = sum(r.committed for r in rows)
    cross = sum(r.cross_shard_committed for r in rows)
    admitted = sum(r.admitted for r in rows)
    elapsed = sum(r.elapsed_ms for r in rows)
    failed = sum(r.aborted + r.rejected for r in rows)
    return {
        "epochs": len(rows),
        "admitted": admitted,
        "committed": committed,
        "cross_shard_committed": cross,
        "aborted": sum(r.aborted for r in rows),
        "rejected": sum(r.rejected for r in rows),
        "carried_over": rows[-1].carried_over if rows else 0,
        "throughput": round(throughput(committed, elapsed), 6),
        "latency_mean_ms": round(float(np.mean(latencies)), 6) if len(latencies) else 0.0,
        "latency_median_ms": round(percentile(latencies, 50), 6),
        "latency_p95_ms": round(percentile(latencies, 95), 6),
        "cross_shard_ratio": round(cross_shard_ratio(cross, committed), 6),
        "failure_rate": round(failure_rate(failed, admitted), 6),
        "node_uniformity": round(float(np.mean([r.node_uniformity for r in rows])), 6) if rows else 0.0,
        "tx_uniformity": round(float(np.mean([r.tx_uniformity for r in rows])), 6) if rows else 0.0,
        "wasted_capacity": round(float(np.mean([r.wasted_capacity for r in rows])), 6) if rows else 0.0,
        "comm_with_merge_ms": round(sum(r.comm_with_merge_ms for r in rows), 6),
        "comm_without_merge_ms": round(sum(r.comm_without_merge_ms for r in rows), 6),
    }
