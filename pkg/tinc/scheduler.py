# -*- coding: utf-8 -*-
"""Workload distribution.

Dependency sets over a sliding window, per-shard dynamic thresholds, the
assignment rules (dependency overlap, lightest load, authorization quorum),
arrival-rate admission and epoch carry-over of failed transactions.
"""
from __future__ import annotations

import logging
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import (Callable, Deque, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set,
                    Tuple)

from .crypto import quorum_size
from .errors import AllShardsSaturated, NoAuthorizedShard, SchedulerError, UnknownNode, ZeroTotalWeight
from .events import Emitter, Saturation
from .model import AccountId, NodeId, ObjectId, ShardId, Transaction, TxId
from .rootplane import ShardPlan

__log__ = logging.getLogger(__name__)

RULE_OVERLAP = "a"
RULE_LIGHTEST = "b"


class DependencyIndex:
    """The last ``window`` transactions, indexed by account and by object."""

    def __init__(self, window: int = 10_000):
        if window < 1:
            raise SchedulerError("dependency window must hold at least one transaction")
        self.window = window
        self._order: Deque[TxId] = deque()
        self._txs: Dict[TxId, Transaction] = {}
        self._by_account: Dict[AccountId, Dict[TxId, None]] = {}
        self._by_object: Dict[ObjectId, Dict[TxId, None]] = {}

    def __contains__(self, tx_id: TxId) -> bool:
        return tx_id in self._txs

    def __len__(self):
        return len(self._txs)

    def get(self, tx_id: TxId) -> Optional[Transaction]:
        return self._txs.get(tx_id)

    def add(self, tx: Transaction) -> None:
        if tx.id in self._txs:
            return
        self._order.append(tx.id)
        self._txs[tx.id] = tx
        for a in tx.accounts:
            self._by_account.setdefault(a, {})[tx.id] = None
        for o in tx.read_set | tx.write_set:
            self._by_object.setdefault(o, {})[tx.id] = None
        while len(self._order) > self.window:
            self._evict(self._order.popleft())

    def _evict(self, tx_id: TxId) -> None:
        tx = self._txs.pop(tx_id)
        for index, keys in ((self._by_account, tx.accounts), (self._by_object, tx.read_set | tx.write_set)):
            for k in keys:
                bucket = index.get(k)
                if bucket is not None:
                    bucket.pop(tx_id, None)
                    if not bucket:
                        del index[k]

    def dependency_set(self, tx: Transaction) -> Set[TxId]:
        candidates: Set[TxId] = {p for p in tx.explicit_parents if p in self._txs}
        for a in tx.accounts:
            candidates.update(self._by_account.get(a, ()))
        for o in tx.read_set | tx.write_set:
            candidates.update(self._by_object.get(o, ()))
        candidates.discard(tx.id)
        return {c for c in candidates if self._txs[c].timestamp < tx.timestamp}


def dependency_set(tx: Transaction, window: DependencyIndex) -> Set[TxId]:
    return window.dependency_set(tx)


@dataclass
class ShardLoad:

    shard: ShardId
    capacity: float = 1.0
    txs: Dict[TxId, float] = field(default_factory=dict)
    weight: float = 0.0
    external_deps: int = 0
    threshold: float = 0.0

    def add(self, tx: Transaction) -> None:
        self.txs[tx.id] = tx.weight
        self.weight += tx.weight

    def remove(self, tx: Transaction) -> None:
        if self.txs.pop(tx.id, None) is not None:
            self.weight -= tx.weight


def compute_threshold(i: ShardId, loads: Mapping[ShardId, ShardLoad], delta: float,
                      total_weight: Optional[float] = None) -> float:
    """L_i = total / shards + delta * external_deps_i / total."""
    if not 0 <= delta <= 1:
        raise SchedulerError(f"delta {delta} outside [0, 1]")
    total = sum(l.weight for l in loads.values()) if total_weight is None else total_weight
    if total <= 0:
        raise ZeroTotalWeight("threshold over a zero-weight workload")
    return total / len(loads) + delta * loads[i].external_deps / total


def admit(rate_lambda: float, loads: Iterable[ShardLoad]) -> bool:
    return rate_lambda <= sum(l.capacity for l in loads)


def authorized_shards(tx: Transaction, plan: ShardPlan, registry, now: float) -> List[ShardId]:
    """Shards with a quorum of control nodes passing the DDID check for ``tx``."""
    if registry is None:
        return list(plan.shards)
    out = []
    for i in plan.shards:
        members = plan.control[i]
        ok = 0
        for n in members:
            try:
                ok += registry.auth_check(n, tx, now)
            except UnknownNode as e:
                __log__.debug(f"ROOT | shard {i}: {e}")
        if ok >= quorum_size(len(members)):
            out.append(i)
    return out


def choose_shard(deps: Set[TxId], loads: Mapping[ShardId, ShardLoad], candidates: Sequence[ShardId],
                 thresholds: Mapping[ShardId, float], rules: str = "abc") -> Tuple[ShardId, str]:
    open_ = [i for i in candidates if loads[i].weight < thresholds[i]]
    if not open_:
        raise AllShardsSaturated(f"candidate shards {list(candidates)} are at their thresholds")
    overlap = {i: (len(deps & loads[i].txs.keys()) if RULE_OVERLAP in rules else 0) for i in open_}
    best = min(open_, key=lambda i: (-overlap[i], loads[i].weight, i))
    return best, (RULE_OVERLAP if overlap[best] > 0 else RULE_LIGHTEST)


def assign(tx: Transaction, plan: ShardPlan, loads: Mapping[ShardId, ShardLoad], registry=None, *,
           deps: Optional[Set[TxId]] = None, now: float = 0.0, delta: float = 0.5,
           total_weight: Optional[float] = None, rules: str = "abc") -> ShardId:
    """Pick a shard for ``tx`` by rule (c), then (a), then (b)."""
    candidates = authorized_shards(tx, plan, registry, now) if "c" in rules else list(plan.shards)
    if not candidates:
        raise NoAuthorizedShard(f"no shard holds an authorized quorum for level {tx.auth_level}")
    total = total_weight if total_weight is not None else sum(l.weight for l in loads.values()) + tx.weight
    thresholds = {i: compute_threshold(i, loads, delta, total) for i in candidates}
    shard, _ = choose_shard(deps or set(), loads, candidates, thresholds, rules)
    return shard


def carry_over(failed: Iterable[Transaction], fresh: Iterable[Transaction]) -> List[Transaction]:
    """Failed transactions first, in timestamp order, then fresh arrivals."""
    return sorted(failed, key=lambda t: (t.timestamp, t.id)) + list(fresh)


class OwnershipMap:
    """Accounts and objects are homed on the shard that first executes a transaction touching them."""

    def __init__(self):
        self._owner: Dict[ObjectId, ShardId] = {}

    def __contains__(self, obj: ObjectId) -> bool:
        return obj in self._owner

    def __len__(self):
        return len(self._owner)

    def owner(self, obj: ObjectId) -> Optional[ShardId]:
        return self._owner.get(obj)

    def get(self, obj: ObjectId, default=None):
        return self._owner.get(obj, default)

    def __getitem__(self, obj: ObjectId) -> ShardId:
        return self._owner[obj]

    def home(self, objs: Iterable[ObjectId], shard: ShardId) -> List[ObjectId]:
        fresh = [o for o in objs if o not in self._owner]
        for o in fresh:
            self._owner[o] = shard
        return fresh

    def owned_by(self, shard: ShardId) -> Set[ObjectId]:
        return {o for o, s in self._owner.items() if s == shard}

    def counts(self, shards: Iterable[ShardId]) -> List[int]:
        counts = {s: 0 for s in shards}
        for s in self._owner.values():
            counts[s] = counts.get(s, 0) + 1
        return list(counts.values())


class Assignment(NamedTuple):
    tx: Transaction
    shard: ShardId
    rule: str
    external_deps: int
    involved: frozenset

    @property
    def cross_shard(self) -> bool:
        return len(self.involved) > 1


class EpochAssignment(NamedTuple):
    epoch: int
    assigned: List[Assignment]
    deferred: List[Transaction]
    rejected: List[Tuple[Transaction, str]]


class Scheduler:
    """Root-plane scheduler; single writer, owned by the event loop.

    Parameters
    ----------
    plan: ShardPlan
        Current shard plan (replaced with :meth:`set_plan` at reconfiguration).
    capacities: Mapping[int, float]
        Capacity mu_i of every shard, in weight per simulated second.
    registry: Optional[DdidRegistry]
        Consulted by rule (c); ``None`` disables authorization filtering.
    rules: str
        ``"abc"`` for the full rule set, ``"b"`` for lightest-load only.
    """

    def __init__(self, plan: ShardPlan, capacities: Mapping[ShardId, float], registry=None, *,
                 delta: float = 0.5, window: int = 10_000, retries: int = 3, rules: str = "abc",
                 ownership: Optional[OwnershipMap] = None):
        if rules not in ("abc", "b"):
            raise SchedulerError(f"unknown rule set {rules!r}")
        self.plan = plan
        self.registry = registry
        self.delta = delta
        self.retries = retries
        self.rules = rules
        self.index = DependencyIndex(window)
        self.ownership = ownership if ownership is not None else OwnershipMap()
        self.capacities = dict(capacities)
        self.loads: Dict[ShardId, ShardLoad] = {}
        self.failures: Dict[TxId, int] = {}
        self.events = Emitter()
        self.log: List[dict] = []
        self._total = 0.0
        self._batch: Set[TxId] = set()
        self._deps: Dict[TxId, Set[TxId]] = {}
        self._rdeps: Dict[TxId, Set[TxId]] = {}
        self._placed: Dict[TxId, ShardId] = {}
        self._reset_loads()

    def _reset_loads(self):
        self.loads = {i: ShardLoad(i, capacity=self.capacities.get(i, 1.0)) for i in self.plan.shards}

    def set_plan(self, plan: ShardPlan, capacities: Optional[Mapping[ShardId, float]] = None) -> None:
        self.plan = plan
        if capacities is not None:
            self.capacities = dict(capacities)
        self._reset_loads()

    @property
    def capacity(self) -> float:
        return sum(self.capacities.get(i, 1.0) for i in self.plan.shards)

    def admit(self, rate_lambda: float, now: float = 0.0) -> bool:
        ok = admit(rate_lambda, self.loads.values())
        if not ok:
            __log__.warning(f"ROOT | arrival rate {rate_lambda:.1f} exceeds capacity {self.capacity:.1f}: throttling")
            self.events.dispatch("on_saturation", Saturation(rate_lambda, self.capacity, now))
        return ok

    def begin_epoch(self, batch: Sequence[Transaction]) -> None:
        self._reset_loads()
        self._total = sum(t.weight for t in batch)
        self._batch = {t.id for t in batch}
        self._deps.clear()
        self._rdeps.clear()
        self._placed.clear()
        for t in batch:
            self.index.add(t)
        for t in batch:
            deps = self.index.dependency_set(t)
            self._deps[t.id] = deps
            for d in deps & self._batch:
                self._rdeps.setdefault(d, set()).add(t.id)

    def thresholds(self, shards: Iterable[ShardId]) -> Dict[ShardId, float]:
        total = self._total if self._total > 0 else sum(l.weight for l in self.loads.values())
        if total <= 0:
            return {i: 0.0 for i in shards}
        out = {}
        for i in shards:
            out[i] = compute_threshold(i, self.loads, self.delta, total)
            self.loads[i].threshold = out[i]
        return out

    def involved_shards(self, tx: Transaction, shard: ShardId) -> frozenset:
        """Owning shards of everything ``tx`` touches, homing fresh objects on ``shard``."""
        self.ownership.home(sorted(tx.touched), shard)
        return frozenset(self.ownership[o] for o in tx.touched)

    def _place(self, tx: Transaction, shard: ShardId) -> int:
        load = self.loads[shard]
        deps = self._deps.get(tx.id, set()) & self._batch
        external = len(deps - load.txs.keys())
        inside = self._rdeps.get(tx.id, set()) & load.txs.keys()
        load.add(tx)
        load.external_deps += external - len(inside)
        self._placed[tx.id] = shard
        return external

    def assign(self, tx: Transaction, now: float = 0.0) -> Assignment:
        if tx.id not in self._deps:
            self.index.add(tx)
            self._deps[tx.id] = self.index.dependency_set(tx)
        deps = self._deps[tx.id]
        if "c" in self.rules:
            candidates = authorized_shards(tx, self.plan, self.registry, now)
        else:
            candidates = list(self.plan.shards)
        if not candidates:
            raise NoAuthorizedShard(f"tx {tx.short_id}: no shard holds an authorized quorum for level {tx.auth_level}")
        if tx.id not in self._batch:
            self._total = sum(l.weight for l in self.loads.values()) + tx.weight
        thresholds = self.thresholds(candidates)
        if self._total <= 0:
            # zero-weight workload: nothing can saturate
            thresholds = {i: float("inf") for i in candidates}
        shard, rule = choose_shard(deps, self.loads, candidates, thresholds, self.rules)
        homes = {self.ownership.get(o, shard) for o in tx.touched}
        # state already homed elsewhere pins the shard; it must pass rules (c) and the threshold too
        eligible = {i for i in homes & set(candidates) if self.loads[i].weight < thresholds[i]}
        if not eligible:
            if not homes & set(candidates):
                raise NoAuthorizedShard(f"tx {tx.short_id}: no owning shard of {sorted(homes)} holds an authorized "
                                        f"quorum for level {tx.auth_level}")
            raise AllShardsSaturated(f"tx {tx.short_id}: owning shards {sorted(homes)} are at their thresholds")
        involved = self.involved_shards(tx, shard)
        if len(involved) == 1:
            shard = next(iter(involved))
        else:
            shard = coordinator_of(tx, self.ownership, self.loads, among=eligible)
        external = self._place(tx, shard)
        return Assignment(tx, shard, rule, external, involved)

    def assign_batch(self, txs: Sequence[Transaction], epoch: int = 0, now: float = 0.0) -> EpochAssignment:
        self.begin_epoch(txs)
        assigned, deferred, rejected = [], [], []
        for tx in txs:
            try:
                a = self.assign(tx, now)
            except AllShardsSaturated:
                deferred.append(tx)
                continue
            except NoAuthorizedShard as e:
                if self.record_failure(tx):
                    rejected.append((tx, str(e)))
                else:
                    deferred.append(tx)
                continue
            assigned.append(a)
            self.log.append({
                "epoch": epoch,
                "tx": tx.id.hex(),
                "shard": a.shard,
                "rule": a.rule,
                "external_deps": a.external_deps,
                "cross_shard": int(a.cross_shard),
            })
        if deferred:
            __log__.info(f"ROOT | epoch {epoch}: {len(deferred)} transactions deferred to the next epoch")
        return EpochAssignment(epoch, assigned, deferred, rejected)

    def record_failure(self, tx: Transaction) -> bool:
        """Count a failed attempt; True once the transaction exhausted its retries."""
        n = self.failures.get(tx.id, 0) + 1
        self.failures[tx.id] = n
        if n > self.retries:
            __log__.info(f"ROOT | tx {tx.short_id} permanently rejected after {n} attempts")
            return True
        return False

    def forget(self, tx: Transaction) -> None:
        self.failures.pop(tx.id, None)

    def external_dependency_count(self) -> int:
        return sum(l.external_deps for l in self.loads.values())


def coordinator_of(tx: Transaction, owners, loads: Optional[Mapping[ShardId, ShardLoad]] = None, *,
                   among: Optional[Iterable[ShardId]] = None) -> ShardId:
    """Shard owning the most of the objects ``tx`` touches.

    Ties go to the lighter shard when ``loads`` is given, then to the lowest id.
    ``among`` restricts the choice to eligible owners.
    """
    allowed = set(among) if among is not None else None
    counts: Dict[ShardId, int] = {}
    for o in tx.touched:
        s = owners[o]
        if allowed is None or s in allowed:
            counts[s] = counts.get(s, 0) + 1
    if not counts:
        raise SchedulerError(f"tx {tx.short_id}: no eligible owner among {sorted(allowed or ())}")
    weight = (lambda s: loads[s].weight if s in loads else 0.0) if loads else (lambda s: 0.0)
    return min(counts, key=lambda s: (-counts[s], weight(s), s))


def random_assignment_external_deps(txs: Sequence[Transaction], shards: int, rng, window: int = 10_000) -> int:
    """External-dependency count of a uniform random assignment of ``txs``."""
    index = DependencyIndex(window)
    for t in txs:
        index.add(t)
    placed = {t.id: rng.randrange(shards) for t in txs}
    batch = set(placed)
    return sum(1 for t in txs for d in index.dependency_set(t) & batch if placed[d] != placed[t.id])
