# -*- coding: utf-8 -*-
"""DDID operation benchmark: wall-clock cost of each registry operation."""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, NamedTuple, Sequence

import humanize
import numpy as np
import psutil

from .crypto import KeyRegistry
from .ddid import ADMIN, DATA_READ, REVOKE, VALIDATE, DdidRegistry, ReputationSignal, RevocationCertificate
from .model import Transaction, canonical_bytes

__log__ = logging.getLogger(__name__)

COLUMNS = ("operation", "threads", "ops", "total_s", "mean_us", "median_us", "p95_us", "ops_per_s")


class BenchRow(NamedTuple):
    operation: str
    threads: int
    ops: int
    total_s: float
    mean_us: float
    median_us: float
    p95_us: float
    ops_per_s: float

    @classmethod
    def from_samples(cls, operation: str, samples: Sequence[float], threads: int = 1,
                     total: float = None) -> "BenchRow":
        arr = np.asarray(samples, dtype=float) * 1e6
        total = float(np.sum(samples)) if total is None else total
        return cls(operation, threads, len(samples), round(total, 6), round(float(arr.mean()), 3),
                   round(float(np.median(arr)), 3), round(float(np.percentile(arr, 95)), 3),
                   round(len(samples) / total, 3) if total > 0 else 0.0)


class BenchReport(NamedTuple):
    rows: List[BenchRow]
    document_bytes: Dict[str, float]
    rss_per_document: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for row in self.rows:
            writer.writerow(row)
        return buf.getvalue()

    def describe(self) -> str:
        lines = [f"{r.operation:<14} x{r.threads:<2} {r.ops:>6} ops  mean {r.mean_us:>10.1f} us  "
                 f"p95 {r.p95_us:>10.1f} us  {r.ops_per_s:>10.1f} ops/s" for r in self.rows]
        sizes = self.document_bytes
        lines.append(f"document size: median {humanize.naturalsize(sizes['median'])}, "
                     f"max {humanize.naturalsize(sizes['max'])}")
        lines.append(f"resident memory per document: {humanize.naturalsize(self.rss_per_document)}")
        return "\n".join(lines)


def _timed(fn: Callable[[int], object], n: int) -> List[float]:
    samples = []
    for i in range(n):
        t0 = time.perf_counter()
        fn(i)
        samples.append(time.perf_counter() - t0)
    return samples


def run_bench(ops: int = 1000, *, seed: int = 0, consortia: int = 2, root_nodes: int = 3,
              threshold: int = 2, threads: Sequence[int] = (1, 2, 4, 8)) -> BenchReport:
    """Create, update, reputation, authorization, audit and revoke ``ops`` documents each."""
    if ops < 1:
        raise ValueError("ops must be positive")
    root = list(range(ops, ops + root_nodes))
    subjects = list(range(ops))
    keys, pairs = KeyRegistry.generate(subjects + root, seed)
    registry = DdidRegistry(keys, root_nodes=root, threshold=threshold)
    for n in root:
        registry.create_ddid(n, "root", [(REVOKE, 0), (ADMIN, 0)], pairs[n].public_key, 0.0)
    process = psutil.Process(os.getpid())
    rss_before = process.memory_info().rss

    ddids: List[str] = []

    def create(i):
        doc = registry.create_ddid(i, f"org{i % consortia}", [(VALIDATE, 3), (DATA_READ, 0)],
                                   pairs[i].public_key, 0.0)
        ddids.append(doc.ddid)

    rows = [BenchRow.from_samples("create", _timed(create, ops))]
    rss_per_doc = max(process.memory_info().rss - rss_before, 0) / ops
    sizes = np.array([len(canonical_bytes(registry.resolve(d))) for d in ddids], dtype=float)

    approvers = [pairs[n] for n in root[:threshold]]

    def update(i):
        proposal = registry.propose_update(ddids[i], {"authorization_scopes": [(VALIDATE, 2), (DATA_READ, 0)]},
                                           root[0])
        for kp in approvers:
            proposal = registry.approve_update(proposal, kp)
        registry.execute_update(proposal)

    rows.append(BenchRow.from_samples("update", _timed(update, ops)))
    signal = ReputationSignal(validated_ok=True, uptime_fraction=1.0, participated=True)
    rows.append(BenchRow.from_samples("reputation", _timed(lambda i: registry.update_reputation(i, signal), ops)))
    tx = Transaction.create("acct-a", "acct-b", auth_level=1)
    rows.append(BenchRow.from_samples("auth_check", _timed(lambda i: registry.auth_check(i, tx, 1.0), ops)))
    for n in threads:
        rows.append(_concurrent_auth(registry, tx, ops, n))
    rows.append(BenchRow.from_samples("audit", _timed(lambda i: registry.audit(ddids[i]), ops)))
    issuer = pairs[root[0]]
    rows.append(BenchRow.from_samples(
        "revoke", _timed(lambda i: registry.revoke(RevocationCertificate.issue(ddids[i], issuer, 2.0)), ops)))
    report = BenchReport(
        rows,
        {"min": float(sizes.min()), "median": float(np.median(sizes)), "max": float(sizes.max())},
        rss_per_doc,
    )
    __log__.info(f"DDID | benchmark of {ops} documents done, store holds "
                 f"{humanize.naturalsize(registry.store.stored_bytes)}")
    return report


def _concurrent_auth(registry: DdidRegistry, tx: Transaction, ops: int, threads: int) -> BenchRow:
    """Read-only authorization checks spread over a thread pool."""
    def check(i):
        t0 = time.perf_counter()
        registry.authorized(i, tx.auth_level, 1.0)
        return time.perf_counter() - t0

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        samples = list(pool.map(check, range(ops)))
    return BenchRow.from_samples("auth_parallel", samples, threads, time.perf_counter() - t0)
