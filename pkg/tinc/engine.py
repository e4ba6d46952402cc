# -*- coding: utf-8 -*-
"""End-to-end simulation of a scenario.

One :class:`Simulation` wires the root plane (DDID registry, shard plan,
scheduler), per-shard PBFT replicas, the cross-shard commit actors and the
data-plane ledgers over a single simulated network, then runs epochs:

* arrivals of the epoch are admitted, merged after the carried-over
  transactions and assigned; when the arrival rate exceeds capacity admission
  is paced at ``utilization`` of the executor capacity and the rest waits in
  the arrival queue;
* every shard runs each released transaction through a FIFO executor
  (``weight / mu`` ms of work), batches the executed ones through PBFT while
  the executor moves on and starts cross-shard commits from its coordinator
  queue;
* latency runs from admission to the commit certificate;
* at the epoch boundary in-flight cross-shard transactions are recovered,
  reputations updated, revoked nodes reconfigured away and leaders rotated.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, NamedTuple, Optional, Set, Tuple

import humanize
import numpy as np

from . import metrics
from .crypto import KeyPair, KeyRegistry, max_faulty
from .ddid import ADMIN, DATA_READ, REVOKE, VALIDATE, DdidRegistry, ReputationSignal, RevocationCertificate
from .errors import CorruptArtifact, DdidError, Deadlock, DigestMismatch, EmptyCounts, LedgerError, PbftError, \
    RootPlaneError, SimulationDeadlock, SimulationError, XShardError
from .events import ReconfigurationTrigger
from .ledger import ShardLedger
from .metrics import EpochMetrics
from .model import CostModel, NodeId, ObjectId, ShardId, Transaction, TxId
from .pbft import Commit, FinalizedBatch, PbftState, PrePrepare, Prepare, Replica, rotate_leader
from .rootplane import ShardPlan, TopologyConfig, distribute_nodes, plan_network, reconfigure
from .scenario import Scenario, parse_scenario
from .scheduler import OwnershipMap, Scheduler, carry_over
from .simnet import Fault, FaultKind, FaultScript, NetConfig, Network
from .workload import account_keys, generate
from .xshard import CrossShardManager, IntraShard, TimeoutState

__log__ = logging.getLogger(__name__)

PBFT_KINDS = (PrePrepare, Prepare, Commit)
TRACE_FORMAT = "tinc-trace/1"


@dataclass
class _Batch:
    intra: Tuple[Transaction, ...]
    included: Tuple[Transaction, ...]
    seq: int = -1

    @property
    def txs(self) -> Tuple[Transaction, ...]:
        return self.included + self.intra


@dataclass
class _Shard:
    shard: ShardId
    ledger: ShardLedger
    replicas: Dict[NodeId, Replica] = field(default_factory=dict)
    leader: Optional[NodeId] = None
    intra: Deque[Transaction] = field(default_factory=deque)
    cross: List[Transaction] = field(default_factory=list)
    # cross-shard transactions applied here and waiting for a block
    included: List[Transaction] = field(default_factory=list)
    busy_until: float = 0.0
    scheduled: Optional[_Batch] = None
    inflight: Optional[_Batch] = None
    token: int = 0


@dataclass
class _EpochStats:
    epoch: int
    started_at: float
    trace_from: int
    admitted: int = 0
    attempted: int = 0
    committed: int = 0
    cross: int = 0
    aborted: int = 0
    rejected: int = 0
    stalled: int = 0
    weight: float = 0.0
    latencies: List[float] = field(default_factory=list)
    block_sizes: List[int] = field(default_factory=list)
    assigned: Counter = field(default_factory=Counter)
    participants: Set[NodeId] = field(default_factory=set)


class RunResult(NamedTuple):
    name: str
    seed: int
    epochs: int
    plan: ShardPlan
    rows: List[EpochMetrics]
    summary: dict
    latencies: List[float]
    ledgers: Dict[ShardId, ShardLedger]
    assignments: List[dict]
    trace: List[dict]
    scenario: Optional[Scenario] = None

    def metrics_csv(self) -> str:
        return metrics.to_csv(self.rows)

    def trace_records(self) -> List[dict]:
        """Header record followed by the network trace, as written to ``trace.ndjson``."""
        header = {
            "format": TRACE_FORMAT,
            "scenario": self.scenario.model_dump(mode="json") if self.scenario is not None else None,
            "seed": self.seed,
            "epochs": self.epochs,
            "summary": self.summary,
        }
        return [header] + list(self.trace)


def node_layout(scenario: Scenario) -> Tuple[Tuple[NodeId, ...], Tuple[NodeId, ...], Tuple[NodeId, ...]]:
    """Control nodes first, then data nodes, then root-plane nodes."""
    topo = scenario.topology
    nc, nd = topo.control_count, topo.data_count
    control = tuple(range(nc))
    data = tuple(range(nc, nc + nd))
    root = tuple(range(nc + nd, nc + nd + topo.root_nodes))
    return control, data, root


class Simulation:
    """A fully wired run of one scenario under one seed.

    Parameters
    ----------
    scenario: Scenario
        Validated scenario document.
    seed: Optional[int]
        Overrides ``scenario.seed``.
    trace: bool
        Record every network event for :func:`tinc.simnet.dump_trace`.
    """

    def __init__(self, scenario: Scenario, seed: Optional[int] = None, *, trace: bool = False):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        topo = scenario.topology
        control, data, root = node_layout(scenario)
        k = topo.consortia
        self.consortium_of = {n: f"org{n % k}" for n in control}
        self.consortium_of.update({n: f"org{(n - len(control)) % k}" for n in data})
        self.root_nodes = root

        self.keys, self.pairs = KeyRegistry.generate(control + data + root, self.seed)
        self.account_pairs: Dict[str, KeyPair] = account_keys(scenario.workload, self.keys, self.seed)
        self.registry = self._build_registry(control, data)
        self.registry.events.add_listener(self._on_revoked, "on_revoked")

        cost = scenario.cost
        cfg = TopologyConfig(control, data, self.consortium_of, topo.epsilon_rep, topo.committee_size,
                             CostModel(cost.t_m, cost.t_g, cost.t_t),
                             workload=scenario.workload.transactions * scenario.workload.weight_mean)
        reps = self.registry.reputations()
        if topo.shards is None:
            plan = plan_network(cfg, reps)
        else:
            plan = distribute_nodes(cfg, reps, topo.shards)
        self.initial_plan = plan
        # the shard count is fixed for the run; reconfiguration only moves nodes
        self.plan = dataclasses.replace(plan, sized_by_cost_model=False)
        self._index_nodes()

        net = scenario.network
        self.network = Network(NetConfig(net.latency, net.cross_latency, net.bandwidth, net.jitter, seed=self.seed),
                               shard_of=self._shard_of_node, trace=trace)
        sched = scenario.scheduler
        self.mu = sched.capacity
        self.ownership = OwnershipMap()
        self.capacities = {i: self.mu for i in self.plan.shards}
        self.scheduler = Scheduler(self.plan, self.capacities, self.registry, delta=sched.delta,
                                   window=sched.window, retries=sched.retries, rules=sched.rules,
                                   ownership=self.ownership)
        self.committed: Dict[TxId, float] = {}
        self.rejected: Dict[TxId, str] = {}
        self.shards: Dict[ShardId, _Shard] = {}
        for i in self.plan.shards:
            ledger = ShardLedger(i, self.keys, self.plan.control[i], owns=lambda o, i=i: self.ownership.get(o) == i,
                                 control_nodes=self.plan.control[i], data_nodes=self.plan.data[i])
            self.shards[i] = _Shard(i, ledger)
        xs = scenario.xshard
        self.xshard = CrossShardManager(self.network, self.plan, self.keys, self.pairs,
                                        {i: rt.ledger for i, rt in self.shards.items()}, self.ownership,
                                        self.registry, tau=xs.tau,
                                        timeouts=TimeoutState(xs.t_min, xs.eps_to, xs.alpha_to),
                                        committed=self.committed.__contains__, seed=self.seed)
        self.xshard.on_resolved = self._on_resolved
        self.xshard.on_applied = self._on_applied
        for node in control:
            self.network.register(node, lambda src, msg, node=node: self._on_pbft(node, msg), PBFT_KINDS)

        self._reserved: Counter = Counter()
        self._pending_starts: Dict[TxId, Tuple[ShardId, Transaction]] = {}
        self._executing: Dict[TxId, Tuple[ShardId, Transaction]] = {}
        self._admitted_at: Dict[TxId, float] = {}
        self._carry: List[Transaction] = []
        self._arrivals: Deque[Transaction] = deque()
        self._appended: Set[Tuple[ShardId, int, int]] = set()
        self._flagged: Set[NodeId] = set()
        self._revoked: Set[NodeId] = set()
        self._departed: Set[NodeId] = set()
        self._closing = False
        self._frozen = True
        self._epoch = 0
        self._stats: Optional[_EpochStats] = None
        self.rows: List[EpochMetrics] = []
        self.latencies: List[float] = []
        self._install({i: self.plan.leader(i) for i in self.plan.shards}, view=0)
        self._inject_faults()

    # -- setup

    def _build_registry(self, control, data) -> DdidRegistry:
        spec = self.scenario.ddid
        admins: Dict[str, List[NodeId]] = {}
        for n in control:
            admins.setdefault(self.consortium_of[n], [n])
        registry = DdidRegistry(self.keys, root_nodes=self.root_nodes, admins=admins,
                                threshold=spec.threshold, alpha=spec.alpha)
        admin_nodes = {a for nodes in admins.values() for a in nodes}
        for n in self.root_nodes:
            registry.create_ddid(n, "root", [(REVOKE, 0), (ADMIN, 0)], self.pairs[n].public_key, 0.0)
        for n in control:
            org = self.consortium_of[n]
            scopes = [(VALIDATE, spec.control_rank), (DATA_READ, 0)] + list(spec.scopes.get(org, ()))
            if n in admin_nodes:
                scopes.append((REVOKE, 0))
            registry.create_ddid(n, org, scopes, self.pairs[n].public_key, 0.0)
        for n in data:
            registry.create_ddid(n, self.consortium_of[n], [(DATA_READ, 0)], self.pairs[n].public_key, 0.0)
        return registry

    def _index_nodes(self) -> None:
        self._node_shard = {n: i for i in self.plan.shards for n in self.plan.control[i] + self.plan.data[i]}

    def _shard_of_node(self, node: NodeId) -> Optional[ShardId]:
        return self._node_shard.get(node)

    def _inject_faults(self) -> None:
        faults = []
        for spec in self.scenario.faults:
            if spec.kind == "revoke":
                self.network.call_later(spec.at or 0.0, lambda n=spec.target: self._revoke(n))
                continue
            faults.append(Fault(FaultKind(spec.kind), spec.target, spec.at, spec.after_messages, spec.delay,
                                frozenset(spec.group)))
        if faults:
            bound = {i: max_faulty(len(self.plan.control[i])) for i in self.plan.shards}
            self.network.inject(FaultScript(tuple(faults), self.scenario.over_threshold), bound)

    def _install(self, leaders: Dict[ShardId, NodeId], view: int) -> None:
        """Fresh replicas for every control node of the current plan."""
        ddid = self.scenario.ddid
        check = self.scenario.workload.sign
        for i in self.plan.shards:
            rt = self.shards[i]
            members = tuple(self.plan.control[i])
            seq = max([r.state.seq for r in rt.replicas.values()] + [rt.ledger.head.seq + 1 if rt.ledger.head else 0])
            rt.replicas = {
                n: Replica(n, PbftState(i, members, leaders[i], view=view, seq=seq), self.pairs[n], self.keys,
                           self.registry, clock=lambda: self.network.now, committed=self.committed.__contains__,
                           a_min=ddid.a_min, check_tx_signatures=check)
                for n in members
            }
            rt.leader = leaders[i]
            rt.ledger.set_validators(members)
            rt.ledger.data_nodes = tuple(self.plan.data[i])
        self.plan = dataclasses.replace(self.plan, leaders=tuple(leaders[i] for i in self.plan.shards))
        self._index_nodes()
        self.scheduler.set_plan(self.plan, self.capacities)
        self.xshard.set_plan(self.plan)

    # -- DDID events

    def _revoke(self, node: NodeId) -> None:
        issuer = self.root_nodes[0]
        try:
            doc = self.registry.document_of(node)
            self.registry.revoke(RevocationCertificate.issue(doc.ddid, self.pairs[issuer], self.network.now))
        except DdidError as e:
            __log__.warning(f"DDID | revocation of node {node} failed: {e}")

    def _on_revoked(self, event: ReconfigurationTrigger) -> None:
        self._revoked.add(event.node)
        self._departed.add(event.node)

    # -- executor

    def _execute(self, rt: _Shard, weight: float) -> float:
        """Reserve executor time for ``weight`` of work; returns when it completes."""
        start = max(self.network.now, rt.busy_until)
        rt.busy_until = start + weight / self.mu * 1000.0
        return rt.busy_until

    def _reserve(self, objs: Iterable[ObjectId]) -> None:
        for o in objs:
            self._reserved[o] += 1

    def _unreserve(self, objs: Iterable[ObjectId]) -> None:
        for o in objs:
            self._reserved[o] -= 1
            if self._reserved[o] <= 0:
                del self._reserved[o]

    def _parents_done(self, tx: Transaction, seen: Iterable[TxId] = ()) -> bool:
        return all(p in self.committed or p in seen for p in tx.explicit_parents)

    def _free(self, tx: Transaction) -> bool:
        return not any(o in self._reserved for o in tx.touched)

    def _release(self, tx: Transaction, shard: ShardId, cross: bool) -> None:
        if self._closing or self._frozen:
            self._carry.append(tx)
            return
        rt = self.shards[shard]
        if cross:
            rt.cross.append(tx)
            self._pump(shard)
            return
        at = self._execute(rt, tx.weight)
        self._executing[tx.id] = (shard, tx)
        self.network.call_later(at - self.network.now, lambda: self._executed(tx))

    def _executed(self, tx: Transaction) -> None:
        entry = self._executing.pop(tx.id, None)
        if entry is None:
            return
        shard, _ = entry
        self.shards[shard].intra.append(tx)
        self._pump(shard)

    def _pump(self, shard: ShardId) -> None:
        if self._frozen:
            return
        rt = self.shards[shard]
        if not self._closing:
            self._start_ready(rt)
        self._schedule_batch(rt)

    def _pump_all(self) -> None:
        for i in self.plan.shards:
            self._pump(i)

    def _start_ready(self, rt: _Shard) -> None:
        waiting = []
        for tx in rt.cross:
            if not (self._parents_done(tx) and self._free(tx)):
                waiting.append(tx)
                continue
            self._reserve(tx.touched)
            at = self._execute(rt, tx.weight)
            self._pending_starts[tx.id] = (rt.shard, tx)
            self.network.call_later(at - self.network.now, lambda tx=tx: self._start(tx))
        rt.cross = waiting

    def _schedule_batch(self, rt: _Shard) -> None:
        if rt.scheduled is not None or rt.inflight is not None or rt.leader in self.network.crashed:
            return
        limit = self.scenario.scheduler.block_size_bytes
        included = tuple(rt.included)
        size = sum(t.size for t in included)
        picked: List[Transaction] = []
        if not self._closing:
            seen: Set[TxId] = set()
            keep: Deque[Transaction] = deque()
            for tx in rt.intra:
                if size + tx.size <= limit and self._parents_done(tx, seen) and self._free(tx):
                    picked.append(tx)
                    seen.add(tx.id)
                    size += tx.size
                else:
                    keep.append(tx)
            rt.intra = keep
        if not picked and not included:
            return
        rt.included = []
        for tx in picked:
            self._reserve(tx.touched)
        batch = _Batch(tuple(picked), included)
        rt.scheduled = batch
        rt.token += 1
        token = rt.token
        self.network.call_later(0.0, lambda: self._propose(rt, batch, token))

    def _unschedule(self, rt: _Shard, batch: _Batch) -> None:
        for tx in batch.intra:
            self._unreserve(tx.touched)
        rt.intra.extendleft(reversed(batch.intra))
        rt.included[:0] = batch.included

    # -- intra-shard consensus

    def _broadcast(self, rt: _Shard, src: NodeId, msgs: Iterable[object]) -> None:
        peers = [n for n in rt.replicas if n != src]
        for msg in msgs:
            self.network.broadcast(src, peers, msg)

    def _propose(self, rt: _Shard, batch: _Batch, token: int) -> None:
        if rt.token != token or rt.scheduled is not batch:
            return
        rt.scheduled = None
        leader = rt.replicas.get(rt.leader)
        if leader is None or rt.leader in self.network.crashed:
            self._unschedule(rt, batch)
            return
        if rt.leader in self.network.equivocating:
            a, b = leader.equivocate(batch.txs, batch.txs[:-1])
            peers = [n for n in rt.replicas if n != rt.leader]
            half = len(peers) // 2
            self.network.broadcast(rt.leader, peers[:half], a)
            self.network.broadcast(rt.leader, peers[half:], b)
            seq = a.seq
        else:
            try:
                pp = leader.leader_propose(batch.txs)
            except PbftError as e:
                __log__.warning(f"PBFT | shard {rt.shard}: leader {rt.leader} cannot propose: {e}")
                self._unschedule(rt, batch)
                return
            self._broadcast(rt, rt.leader, leader.drain())
            seq = pp.seq
        batch.seq = seq
        rt.inflight = batch

    def _on_pbft(self, node: NodeId, msg) -> None:
        shard = self._node_shard.get(node)
        rt = self.shards.get(shard) if shard is not None else None
        replica = rt.replicas.get(node) if rt is not None else None
        if replica is None or node in self.network.crashed:
            return
        try:
            out = replica.on_message(msg)
        except DigestMismatch as e:
            self._flagged.add(e.evidence.leader)
            return
        except PbftError as e:
            __log__.debug(f"PBFT | node {node} rejected {type(msg).__name__}: {e}")
            return
        if out.outbound:
            self._broadcast(rt, node, out.outbound)
        if out.finalized is not None:
            self._on_finalized(rt, node, out.finalized)

    def _on_finalized(self, rt: _Shard, node: NodeId, fb: FinalizedBatch) -> None:
        key = (rt.shard, fb.view, fb.seq)
        if key not in self._appended:
            self._appended.add(key)
            block = fb.to_block()
            try:
                rt.ledger.append_block(block, fb.commit_cert)
            except LedgerError as e:
                __log__.error(f"LEDGER | shard {rt.shard}: finalized seq {fb.seq} not appended: {e}")
            else:
                now = self.network.now
                self._stats.block_sizes.append(block.size)
                self._stats.participants.update(fb.commit_cert.signers)
                for tx in block.txs:
                    if tx.id not in self.committed:
                        self._commit(tx, now, cross=False)
        if node == rt.leader and rt.inflight is not None and rt.inflight.seq == fb.seq:
            batch, rt.inflight = rt.inflight, None
            for tx in batch.intra:
                self._unreserve(tx.touched)
            for tx in batch.intra:
                if tx.id not in self.committed:
                    self._fail(tx, "block not appended")
            if self.scenario.workload.parent_fraction > 0:
                self._pump_all()
            else:
                self._pump(rt.shard)

    # -- cross-shard

    def _start(self, tx: Transaction) -> None:
        entry = self._pending_starts.pop(tx.id, None)
        if entry is None:
            return
        shard, _ = entry
        try:
            route = self.xshard.start(tx, self._epoch, prefer=shard)
        except XShardError as e:
            __log__.warning(f"XSHARD | tx {tx.short_id} not started: {e}")
            self._unreserve(tx.touched)
            self._fail(tx, str(e))
            return
        if isinstance(route, IntraShard):
            self._unreserve(tx.touched)
            self.shards[route.shard].intra.append(tx)
            self._pump(route.shard)

    def _on_resolved(self, tx: Transaction, committed: bool, reason: str, at: float) -> None:
        self._unreserve(tx.touched)
        if committed:
            applied = self.xshard.applied_at.get(tx.id)
            if tx.id not in self.committed:
                self._commit(tx, max(applied.values()) if applied else at, cross=True)
        else:
            self._stats.aborted += 1
            self._fail(tx, reason)
        self._pump_all()

    def _on_applied(self, shard: ShardId, tx: Transaction) -> None:
        self.shards[shard].included.append(tx)
        self._pump(shard)

    # -- bookkeeping

    def _commit(self, tx: Transaction, at: float, *, cross: bool) -> None:
        self.committed[tx.id] = at
        stats = self._stats
        stats.committed += 1
        stats.cross += int(cross)
        stats.weight += tx.weight
        stats.latencies.append(at - self._admitted_at.pop(tx.id, tx.timestamp))
        self.scheduler.forget(tx)

    def _fail(self, tx: Transaction, reason: str) -> None:
        if self.scheduler.record_failure(tx):
            self._admitted_at.pop(tx.id, None)
            self.rejected[tx.id] = reason
            self._stats.rejected += 1
        else:
            self._carry.append(tx)

    # -- epochs

    def _admit(self, close: float) -> List[Transaction]:
        """Arrivals up to ``close``, paced to the executor capacity when saturated.

        Every admitted transaction gets an admission time in ``_admitted_at``;
        it is released to its shard then and its latency counts from there.
        """
        spec = self.scenario.workload
        now = self.network.now
        fresh = []
        while self._arrivals and self._arrivals[0].timestamp < close:
            fresh.append(self._arrivals.popleft())
        rate = spec.rate * spec.weight_mean
        if self.scheduler.admit(rate, now):
            for tx in fresh:
                self._admitted_at.setdefault(tx.id, max(tx.timestamp, now))
            return fresh
        allowed = self.scenario.scheduler.utilization * self.scheduler.capacity
        budget = allowed * self.scenario.epoch_ms / 1000.0
        admitted, used, slot = [], 0.0, now
        for i, tx in enumerate(fresh):
            slot = max(slot, tx.timestamp)
            if used + tx.weight > budget or slot >= close:
                self._arrivals.extendleft(reversed(fresh[i:]))
                break
            admitted.append(tx)
            self._admitted_at.setdefault(tx.id, slot)
            slot += tx.weight / allowed * 1000.0
            used += tx.weight
        return admitted

    def _quiet(self) -> bool:
        return all(rt.inflight is None and rt.scheduled is None for rt in self.shards.values()) \
            and not self.xshard.in_flight()

    def _close(self) -> None:
        """Stop new work; scheduled batches, executions and starts go back to their queues."""
        self._closing = True
        for rt in self.shards.values():
            if rt.scheduled is not None:
                self._unschedule(rt, rt.scheduled)
                rt.scheduled = None
                rt.token += 1
        for shard, tx in list(self._pending_starts.values()):
            self._unreserve(tx.touched)
            self.shards[shard].cross.append(tx)
        self._pending_starts.clear()
        for shard, tx in list(self._executing.values()):
            self.shards[shard].intra.append(tx)
        self._executing.clear()
        for rt in self.shards.values():
            rt.busy_until = self.network.now
        self._pump_all()

    def _grace(self) -> float:
        net = self.scenario.network
        bound = max(self.xshard.deadline(i) for i in self.plan.shards)
        return max(4 * bound, 10 * max(net.latency, net.cross_latency or 0.0))

    def _run_epoch(self, epoch: int) -> EpochMetrics:
        self._epoch = epoch
        start = self.network.now
        close = start + self.scenario.epoch_ms
        stats = self._stats = _EpochStats(epoch, start, len(self.xshard.trace))
        fresh = self._admit(close)
        stats.admitted = len(fresh)
        batch = carry_over(self._carry, fresh)
        self._carry = []
        plan = self.scheduler.assign_batch(batch, epoch=epoch, now=start)
        stats.attempted = len(batch)
        for tx, reason in plan.rejected:
            self._admitted_at.pop(tx.id, None)
            self.rejected[tx.id] = reason
            stats.rejected += 1
        self._carry.extend(plan.deferred)
        self._closing = False
        self._frozen = False
        for a in plan.assigned:
            stats.assigned[a.shard] += 1
            at = max(self._admitted_at.get(a.tx.id, a.tx.timestamp), start)
            self.network.call_later(at - start, lambda a=a: self._release(a.tx, a.shard, a.cross_shard))
        self._pump_all()
        self.network.run_until(until=close)
        self._close()
        try:
            self.network.run_until(self._quiet, until=close + self._grace())
        except Deadlock as e:
            __log__.info(f"NET | epoch {epoch} drained with blocked nodes: {e}")
        row = self._end_epoch(stats)
        self.rows.append(row)
        self.latencies.extend(stats.latencies)
        __log__.info(f"epoch {epoch}: {row.committed} committed ({row.cross_shard_committed} cross-shard), "
                     f"{row.aborted} aborted, {row.carried_over} carried, {self.network.describe()}")
        return row

    def _end_epoch(self, stats: _EpochStats) -> EpochMetrics:
        self._frozen = True
        self.xshard.recover()
        self.xshard.reset_epoch()
        stalled: Set[NodeId] = set()
        for rt in self.shards.values():
            if rt.inflight is not None:
                stalled.add(rt.leader)
                batch, rt.inflight = rt.inflight, None
                for tx in batch.intra:
                    self._unreserve(tx.touched)
                    if tx.id not in self.committed:
                        stats.stalled += 1
                        self._fail(tx, "batch did not finalize")
                rt.included[:0] = [t for t in batch.included if not rt.ledger.contains(t.id)]
            self._carry.extend(rt.intra)
            self._carry.extend(rt.cross)
            rt.intra = deque()
            rt.cross = []
            if rt.ledger.open_snapshots:
                __log__.error(f"LEDGER | shard {rt.shard}: {len(rt.ledger.open_snapshots)} snapshots open at epoch end")
        self._reserved.clear()
        row = self._epoch_metrics(stats)
        self._rotate(stats, stalled)
        return row

    def _rotate(self, stats: _EpochStats, stalled: Set[NodeId]) -> None:
        crashed = set(self.network.crashed) | set(self.network.silent)
        flagged = self._flagged | stalled | set(self.network.equivocating)
        for node in self.plan.control_nodes:
            if node in self._revoked:
                continue
            signal = ReputationSignal(validated_ok=node not in flagged,
                                      uptime_fraction=0.0 if node in crashed else 1.0,
                                      participated=node in stats.participants)
            self.registry.update_reputation(node, signal)
        reps = self.registry.reputations()
        if self._departed:
            try:
                plan = reconfigure(self.plan, self._departed, (), reps)
            except RootPlaneError as e:
                __log__.error(f"ROOT | reconfiguration after revocation failed: {e}")
            else:
                self.plan = plan
                self._index_nodes()
            self._departed = set()
        leaders = {}
        for i in self.plan.shards:
            rt = self.shards[i]
            members = tuple(self.plan.control[i])
            current = rt.leader if rt.leader in members else members[0]
            seq = max([r.state.seq for r in rt.replicas.values()] + [0])
            state = rotate_leader(PbftState(i, members, current, view=self._epoch, seq=seq), reps,
                                  committee=self.plan.committee, flagged=flagged | crashed | self._revoked)
            leaders[i] = state.leader
        self._flagged = set()
        self._install(leaders, view=self._epoch + 1)

    def _epoch_metrics(self, stats: _EpochStats) -> EpochMetrics:
        plan = self.plan
        elapsed = self.network.now - stats.started_at
        capacity = self.scheduler.capacity * elapsed / 1000.0
        try:
            node_u = metrics.uniformity([len(plan.control[i]) + len(plan.data[i]) for i in plan.shards])
        except EmptyCounts:
            node_u = 1.0
        try:
            tx_u = metrics.uniformity([stats.assigned.get(i, 0) for i in plan.shards])
        except EmptyCounts:
            tx_u = 1.0
        avg_block = float(np.mean(stats.block_sizes)) if stats.block_sizes else 0.0
        members = (len(plan.control_nodes) + len(plan.data_nodes)) / plan.shard_count
        net = self.scenario.network
        merging = metrics.merging_comparison(self.xshard.trace[stats.trace_from:],
                                             latency=net.cross_latency if net.cross_latency is not None else net.latency,
                                             transmit=4096 / net.bandwidth)
        failed = stats.aborted + stats.rejected + stats.stalled
        return EpochMetrics(
            epoch=stats.epoch,
            shards=plan.shard_count,
            admitted=stats.admitted,
            committed=stats.committed,
            cross_shard_committed=stats.cross,
            aborted=stats.aborted,
            rejected=stats.rejected,
            carried_over=len(self._carry),
            elapsed_ms=round(elapsed, 6),
            throughput=metrics.throughput(stats.committed, elapsed),
            latency_mean_ms=float(np.mean(stats.latencies)) if stats.latencies else 0.0,
            latency_p95_ms=metrics.percentile(stats.latencies, 95),
            cross_shard_ratio=metrics.cross_shard_ratio(stats.cross, stats.committed),
            failure_rate=metrics.failure_rate(failed, stats.attempted),
            wasted_capacity=metrics.wasted_capacity(min(stats.weight, capacity), capacity) if capacity > 0 else 1.0,
            node_uniformity=node_u,
            tx_uniformity=tx_u,
            avg_block_bytes=avg_block,
            d_total_bytes=metrics.d_total(avg_block, plan.shard_count, members),
            comm_with_merge_ms=merging.with_merge_ms,
            comm_without_merge_ms=merging.without_merge_ms,
        )

    # -- public

    def run(self, epochs: Optional[int] = None) -> RunResult:
        epochs = epochs or self.scenario.epochs
        if self.rows:
            raise SimulationError("a simulation runs once")
        spec = self.scenario.workload
        txs = generate(spec, epochs=epochs, epoch_ms=self.scenario.epoch_ms, seed=self.seed,
                       keys=self.account_pairs if spec.sign else None)
        self._arrivals = deque(txs)
        __log__.info(f"running {self.scenario.name!r} seed {self.seed}: {self.plan.shard_count} shards, "
                     f"{len(txs)} transactions, {epochs} epochs")
        for epoch in range(epochs):
            self._run_epoch(epoch)
        summary = metrics.summary(self.rows, self.latencies)
        if summary["admitted"] and not summary["committed"]:
            if not self.scenario.over_threshold:
                raise SimulationDeadlock(f"{self.scenario.name!r} seed {self.seed}: nothing committed in "
                                         f"{epochs} epochs ({summary['admitted']} admitted)")
            __log__.warning(f"{self.scenario.name!r}: no progress with faults over threshold")
        summary.update({
            "scenario": self.scenario.name,
            "seed": self.seed,
            "shards": self.plan.shard_count,
            "conservation": metrics.conservation_holds(summary["admitted"], summary["committed"],
                                                       summary["rejected"], summary["carried_over"]),
            "ledger_heads": {str(i): (rt.ledger.head.header_hash.hex() if rt.ledger.head else "")
                             for i, rt in self.shards.items()},
            "simulated_ms": round(self.network.now, 6),
        })
        __log__.info(f"run finished after {humanize.precisedelta(self.network.now / 1000.0)} simulated, "
                     f"{summary['committed']} committed")
        return RunResult(self.scenario.name, self.seed, epochs, self.initial_plan, list(self.rows), summary,
                         list(self.latencies), {i: rt.ledger for i, rt in self.shards.items()},
                         list(self.scheduler.log), list(self.network.trace), self.scenario)


def run_scenario(scenario: Scenario, seed: Optional[int] = None, *, epochs: Optional[int] = None,
                 trace: bool = False) -> RunResult:
    return Simulation(scenario, seed, trace=trace).run(epochs)


class ReplayReport(NamedTuple):
    summary_matches: bool
    trace_matches: bool
    # index of the first differing trace record, header excluded
    first_divergence: Optional[int]
    expected: dict
    actual: dict

    @property
    def ok(self) -> bool:
        return self.summary_matches and self.trace_matches


def _canonical(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def replay(records: List[dict]) -> ReplayReport:
    """Re-run the scenario named in a trace header and compare against the recorded run.

    Raises :class:`CorruptArtifact` when the header is missing or malformed.
    """
    if not records or records[0].get("format") != TRACE_FORMAT:
        raise CorruptArtifact("missing or unknown trace header")
    header = records[0]
    if not isinstance(header.get("scenario"), dict) or "summary" not in header:
        raise CorruptArtifact("trace header carries no scenario or summary")
    scenario = parse_scenario(header["scenario"], source="trace header")
    recorded = records[1:]
    result = run_scenario(scenario, header["seed"], epochs=header["epochs"], trace=bool(recorded))
    actual = json.loads(_canonical(result.summary))
    summary_matches = _canonical(actual) == _canonical(header["summary"])
    fresh = [json.loads(_canonical(r)) for r in result.trace] if recorded else []
    first = None
    for i, (a, b) in enumerate(zip(recorded, fresh)):
        if _canonical(a) != _canonical(b):
            first = i
            break
    if first is None and len(recorded) != len(fresh):
        first = min(len(recorded), len(fresh))
    report = ReplayReport(summary_matches, first is None, first, header["summary"], actual)
    if report.ok:
        __log__.info(f"replay of {scenario.name!r} seed {header['seed']} matches ({len(recorded)} trace records)")
    else:
        __log__.warning(f"replay of {scenario.name!r} seed {header['seed']} diverges "
                        f"(summary {'ok' if summary_matches else 'differs'}, first trace divergence {first})")
    return report
