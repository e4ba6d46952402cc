# -*- coding: utf-8 -*-
"""Cross-shard atomic commit.

A cross-shard transaction is driven by the leader of its coordinator shard:

* PREPARE goes to every replica of every involved shard. Each shard validates
  (authorization, local parents, locks), writes speculatively and collects
  ``2f+1`` PREPARED votes into a shard certificate.
* NormalPath: the coordinator turns the shard certificates into a commit
  certificate. Holding certificates from every shard makes it the apply signal.
  With only ``ceil(2|S|/3)`` of them, a tentative certificate starts local
  commits and the coordinator sends APPLY once every shard reports COMMITTED,
  or aborts when the commit phase times out.
* FastPath: shard certificates go all-to-all and a shard applies as soon as it
  holds every one of them.

No shard applies writes before a commit decision exists, so an abort always
leaves every shard on its pre-transaction state.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Container, Dict, Iterable, List, Mapping, NamedTuple, Optional, Set, Tuple, Union

from .backoff import ExponentialBackoff
from .crypto import KeyPair, KeyRegistry, PublicKey, Signature, ThresholdCertificate, aggregate, max_faulty, \
    quorum_size, sign, verify_certificate
from .errors import CommitPhaseTimeout, LocalValidationFailed, ShardTimeout, UnknownKey, UnknownNode, \
    UnknownObjectOwner, XShardError
from .events import CrossShardAborted, Emitter
from .model import UNSIGNED, Digest, NodeId, ObjectId, ShardId, Transaction, TxId, canonical, canonical_bytes, \
    digest, signing_bytes

__log__ = logging.getLogger(__name__)

TAU = 2
T_MIN = 100.0
EPS_TO = 0.1
ALPHA_TO = 0.8

PREPARED = "prepared"
NACK = "nack"
COMMITTED = "committed"
EXECUTED = "executed"

STATUS_RETRIES = 6


class Path(Enum):
    FAST = "fast"
    NORMAL = "normal"


class IntraShard(NamedTuple):
    tx_id: TxId
    shard: ShardId


@dataclass(frozen=True)
class CrossShardPlan:

    tx_id: TxId
    shards: Tuple[ShardId, ...]
    objects: Tuple[Tuple[ObjectId, ShardId], ...]
    edges: Tuple[Tuple[ObjectId, ObjectId], ...]
    coordinator: ShardId
    path: Path

    def objects_on(self, shard: ShardId) -> List[ObjectId]:
        return [o for o, s in self.objects if s == shard]


def commit_quorum(shard_count: int) -> int:
    """ceil(2 |S| / 3) shard certificates."""
    return math.ceil(shard_count * 2 / 3)


def classify_and_route(tx: Transaction, owners, locked: Container[ObjectId] = (), *,
                       tau: int = TAU, prefer: Optional[ShardId] = None) -> Union[IntraShard, CrossShardPlan]:
    """Split ``tx`` by object ownership and pick the coordinator and path.

    ``owners`` maps objects to shards. ``locked`` holds objects locked by other
    in-flight cross-shard transactions, which force the NormalPath. The
    coordinator owns the most touched objects; ``prefer`` wins a tie, otherwise
    the lowest shard id does.
    """
    homes: Dict[ObjectId, ShardId] = {}
    for obj in sorted(tx.touched):
        shard = owners.get(obj)
        if shard is None:
            raise UnknownObjectOwner(f"tx {tx.short_id}: no owner for {obj!r}")
        homes[obj] = shard
    shards = sorted(set(homes.values()))
    if len(shards) == 1:
        return IntraShard(tx.id, shards[0])
    counts = {s: 0 for s in shards}
    for s in homes.values():
        counts[s] += 1
    coordinator = min(shards, key=lambda s: (-counts[s], s != prefer, s))
    edges = tuple((r, w) for r in sorted(tx.read_set) for w in sorted(tx.writes) if r != w)
    contention = any(obj in locked for obj in homes)
    path = Path.FAST if len(shards) <= tau and not contention else Path.NORMAL
    return CrossShardPlan(tx.id, tuple(shards), tuple(homes.items()), edges, coordinator, path)


# ---------------------------------------------------------------------------
# timeouts

@dataclass
class TimeoutState:
    """Per-shard EWMA of response times and the derived timeout."""

    t_min: float = T_MIN
    epsilon: float = EPS_TO
    alpha: float = ALPHA_TO
    mean: Dict[ShardId, float] = field(default_factory=dict)

    def timeout(self, shard: ShardId) -> float:
        if shard not in self.mean:
            return self.t_min
        return max(self.t_min, self.mean[shard] * (1 + self.epsilon))


def observe_response(shard: ShardId, measured: float, ts: TimeoutState) -> TimeoutState:
    if measured < 0:
        raise XShardError(f"negative response time {measured}")
    prior = ts.mean.get(shard)
    ts.mean[shard] = measured if prior is None else ts.alpha * prior + (1 - ts.alpha) * measured
    return ts


# ---------------------------------------------------------------------------
# locks

class LockTable:
    """Exclusive locks for writes, shared locks for reads, all-or-nothing."""

    def __init__(self):
        self._writer: Dict[ObjectId, TxId] = {}
        self._readers: Dict[ObjectId, Set[TxId]] = {}
        self._held: Dict[TxId, Tuple[Tuple[ObjectId, ...], Tuple[ObjectId, ...]]] = {}

    def __contains__(self, obj: ObjectId) -> bool:
        return obj in self._writer or bool(self._readers.get(obj))

    def holder(self, obj: ObjectId) -> Optional[TxId]:
        return self._writer.get(obj)

    def acquire(self, tx_id: TxId, reads: Iterable[ObjectId], writes: Iterable[ObjectId]) -> bool:
        writes = tuple(sorted(set(writes)))
        reads = tuple(sorted(set(reads) - set(writes)))
        for obj in writes:
            if self._writer.get(obj, tx_id) != tx_id or self._readers.get(obj, set()) - {tx_id}:
                return False
        for obj in reads:
            if self._writer.get(obj, tx_id) != tx_id:
                return False
        for obj in writes:
            self._writer[obj] = tx_id
        for obj in reads:
            self._readers.setdefault(obj, set()).add(tx_id)
        self._held[tx_id] = (reads, writes)
        return True

    def release(self, tx_id: TxId) -> None:
        reads, writes = self._held.pop(tx_id, ((), ()))
        for obj in writes:
            if self._writer.get(obj) == tx_id:
                del self._writer[obj]
        for obj in reads:
            holders = self._readers.get(obj)
            if holders:
                holders.discard(tx_id)
                if not holders:
                    del self._readers[obj]

    def __len__(self):
        return len(self._held)


# ---------------------------------------------------------------------------
# messages

def shard_vote_digest(phase: str, tx_id: TxId, shard: ShardId, ok: bool = True) -> Digest:
    return digest(canonical_bytes(("xshard", phase, tx_id, shard, ok)))


@canonical
@dataclass(frozen=True)
class XPrepare:

    tx: Transaction
    view: int
    seq: int
    coordinator: ShardId
    shards: Tuple[ShardId, ...]
    path: str
    sender: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)


@canonical
@dataclass(frozen=True)
class ShardVote:

    tx_id: TxId
    shard: ShardId
    phase: str
    ok: bool
    signer: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)

    @property
    def vote(self) -> Digest:
        return shard_vote_digest(self.phase, self.tx_id, self.shard, self.ok)


@canonical
@dataclass(frozen=True)
class ShardCertificate:
    """Threshold attestation that a shard completed one phase for a transaction."""

    tx_id: TxId
    shard: ShardId
    phase: str
    cert: ThresholdCertificate


@canonical
@dataclass(frozen=True)
class XCommit:

    tx_id: TxId
    view: int
    seq: int
    certs: Tuple[ShardCertificate, ...]
    full: bool
    sender: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)


@canonical
@dataclass(frozen=True)
class XApply:

    tx_id: TxId
    certs: Tuple[ShardCertificate, ...]
    sender: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)


@canonical
@dataclass(frozen=True)
class XAbort:

    tx_id: TxId
    reason: str
    sender: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)


@canonical
@dataclass(frozen=True)
class XStatus:

    tx_id: TxId
    shard: ShardId
    asker: NodeId


MESSAGE_KINDS = (XPrepare, ShardVote, ShardCertificate, XCommit, XApply, XAbort, XStatus)


def valid_shard_certificate(sc: ShardCertificate, members: Iterable[NodeId], keys: KeyRegistry) -> bool:
    members = tuple(members)
    ok = sc.phase != NACK
    need = quorum_size(len(members)) if ok else max_faulty(len(members)) + 1
    if sc.cert.digest != shard_vote_digest(sc.phase, sc.tx_id, sc.shard, ok):
        return False
    return verify_certificate(sc.cert, keys, members, min_k=need)


class CrossShardReceipt(NamedTuple):
    tx_id: TxId
    path: Path
    coordinator: ShardId
    receipts: Tuple[ShardCertificate, ...]
    started_at: float
    finished_at: float
    applied_at: Tuple[Tuple[ShardId, float], ...]

    @property
    def latency(self) -> float:
        return self.finished_at - self.started_at

    @property
    def apply_delay(self) -> float:
        return max(t for _, t in self.applied_at) - self.started_at


# ---------------------------------------------------------------------------
# state

@dataclass
class _Participant:
    tx: Transaction
    shard: ShardId
    shards: Tuple[ShardId, ...]
    coordinator_node: NodeId
    path: Path
    status: str = "new"
    valid: Optional[bool] = None
    reason: str = ""
    voted: bool = False
    full_commit: bool = False
    apply_signal: bool = False
    certs: Dict[ShardId, ShardCertificate] = field(default_factory=dict)
    votes: Dict[Tuple[str, NodeId], Dict[NodeId, ShardVote]] = field(default_factory=dict)
    formed: Set[Tuple[str, NodeId]] = field(default_factory=set)
    cast: Set[Tuple[str, NodeId]] = field(default_factory=set)
    node_certs: Dict[NodeId, Set[ShardId]] = field(default_factory=dict)
    backoff: Optional[ExponentialBackoff] = None
    status_queries: int = 0

    @property
    def resolved(self) -> bool:
        return self.status in ("applied", "aborted")


@dataclass
class _Coordination:
    tx: Transaction
    plan: CrossShardPlan
    node: NodeId
    view: int
    seq: int
    started_at: float
    sent_at: float
    certs: Dict[ShardId, ShardCertificate] = field(default_factory=dict)
    committed: Dict[ShardId, ShardCertificate] = field(default_factory=dict)
    receipts: Dict[ShardId, ShardCertificate] = field(default_factory=dict)
    tentative: Optional[XCommit] = None
    decision: Optional[str] = None
    decision_msg: Optional[object] = None
    done: bool = False


class CoordinatorLog:
    """Decisions of one coordinator shard; shared by its replicas."""

    def __init__(self, shard: ShardId):
        self.shard = shard
        self.decisions: Dict[TxId, str] = {}

    def record(self, tx_id: TxId, decision: str) -> bool:
        if tx_id in self.decisions:
            return self.decisions[tx_id] == decision
        self.decisions[tx_id] = decision
        return True

    def get(self, tx_id: TxId) -> Optional[str]:
        return self.decisions.get(tx_id)


class CrossShardManager:
    """Coordinator and participant state machines for every shard of a run.

    Parameters
    ----------
    network: Network
        Transport and clock.
    plan: ShardPlan
        Shard membership; coordinators are shard leaders.
    keys: KeyRegistry
        Verification keys.
    pairs: Mapping[int, KeyPair]
        Signing keys of the control nodes.
    ledgers: Mapping[int, ShardLedger]
        Per-shard ledgers holding speculative state.
    owners: OwnershipMap
        Object homes, used for classification and speculative writes.
    registry: Optional[DdidRegistry]
        DDID gate for votes.
    committed: Callable[[bytes], bool]
        Whether a transaction id committed; checks local parents.
    """

    def __init__(self, network, plan, keys: KeyRegistry, pairs: Mapping[NodeId, KeyPair], ledgers, owners,
                 registry=None, *, tau: int = TAU, timeouts: Optional[TimeoutState] = None,
                 committed: Optional[Callable[[TxId], bool]] = None, seed: int = 0):
        self.network = network
        self.plan = plan
        self.keys = keys
        self.pairs = pairs
        self.ledgers = ledgers
        self.owners = owners
        self.registry = registry
        self.tau = tau
        self.timeouts = timeouts or TimeoutState()
        self.committed = committed
        self.seed = seed
        self.events = Emitter()
        self.locks: Dict[ShardId, LockTable] = {i: LockTable() for i in plan.shards}
        self.logs: Dict[ShardId, CoordinatorLog] = {i: CoordinatorLog(i) for i in plan.shards}
        self.participants: Dict[Tuple[ShardId, TxId], _Participant] = {}
        self.coordinations: Dict[TxId, _Coordination] = {}
        self.archive: List[CrossShardReceipt] = []
        self.applied_at: Dict[TxId, Dict[ShardId, float]] = {}
        self.trace: List[Tuple[float, ShardId, ShardId, str]] = []
        self.counts = {"fast": 0, "normal": 0, "aborted": 0, "committed": 0, "status": 0}
        self.on_resolved: Optional[Callable[[Transaction, bool, str, float], None]] = None
        self.on_applied: Optional[Callable[[ShardId, Transaction], None]] = None
        self._seq = 0
        self._registered: Set[NodeId] = set()
        cfg = network.config
        cross = cfg.latency if cfg.cross_latency is None else cfg.cross_latency
        # PREPARE out, votes inside the shard, certificate back
        self.round_trip = 2 * cross + cfg.latency
        self.propagation = self.round_trip * (1 + cfg.jitter) + 3 * 4096 / cfg.bandwidth
        self.register_nodes(plan.control_nodes)

    # -- wiring

    def register_nodes(self, nodes: Iterable[NodeId]) -> None:
        for node in nodes:
            if node not in self._registered:
                self._registered.add(node)
                self.network.register(node, lambda src, msg, node=node: self.handle(node, src, msg), MESSAGE_KINDS)

    def set_plan(self, plan) -> None:
        self.plan = plan
        for i in plan.shards:
            self.locks.setdefault(i, LockTable())
            self.logs.setdefault(i, CoordinatorLog(i))
        self.register_nodes(plan.control_nodes)

    @property
    def now(self) -> float:
        return self.network.now

    def deadline(self, shard: ShardId) -> float:
        """Propagation bound of one phase plus the shard's dynamic timeout."""
        return self.propagation + self.timeouts.timeout(shard)

    def locked(self, obj: ObjectId) -> bool:
        return any(obj in table for table in self.locks.values())

    def in_flight(self) -> List[TxId]:
        return [t for t, c in self.coordinations.items() if not c.done]

    def _members(self, shard: ShardId) -> Tuple[NodeId, ...]:
        return tuple(self.plan.control[shard])

    def _key(self, node: NodeId) -> PublicKey:
        if self.registry is not None and node in self.registry:
            return self.registry.key_of(node)
        return self.keys.public_key(node)

    def _authorized(self, node: NodeId, level: int) -> bool:
        if self.registry is None:
            return True
        try:
            return self.registry.authorized(node, level, self.now)
        except UnknownNode:
            return False

    def _sign(self, node: NodeId, msg):
        return dataclasses.replace(msg, signature=sign(self.pairs[node], signing_bytes(msg), self.keys.scheme))

    def _verify(self, msg) -> bool:
        try:
            return self.keys.verify(signing_bytes(msg), msg.signature, self._key(msg.sender))
        except UnknownKey:
            return False

    def _send(self, src: NodeId, dst: NodeId, msg) -> None:
        shard_of = self.plan.shard_of
        s, d = shard_of(src), shard_of(dst)
        if s != d:
            self.trace.append((self.now, s, d, type(msg).__name__))
        if src == dst:
            self.network.call_later(0.0, lambda: self.handle(dst, src, msg))
        else:
            self.network.send(src, dst, msg)

    def _multicast(self, src: NodeId, dsts: Iterable[NodeId], msg) -> None:
        for dst in dsts:
            self._send(src, dst, msg)

    # -- coordinator

    def start(self, tx: Transaction, view: int = 0, *, started_at: Optional[float] = None,
              prefer: Optional[ShardId] = None) -> Union[IntraShard, CrossShardPlan]:
        """Classify ``tx`` and, if it spans shards, run the prepare phase."""
        locked = {o for o in tx.touched if self.locked(o)}
        route = classify_and_route(tx, self.owners, locked, tau=self.tau, prefer=prefer)
        if isinstance(route, IntraShard):
            return route
        self.run_prepare_phase(tx, route, view, started_at=started_at)
        return route

    def run_prepare_phase(self, tx: Transaction, plan: CrossShardPlan, view: int = 0, *,
                          started_at: Optional[float] = None) -> None:
        if tx.id in self.coordinations and not self.coordinations[tx.id].done:
            raise XShardError(f"tx {tx.short_id} already in flight")
        node = self.plan.leader(plan.coordinator)
        self._seq += 1
        c = _Coordination(tx, plan, node, view, self._seq, started_at if started_at is not None else self.now, self.now)
        self.coordinations[tx.id] = c
        self.counts[plan.path.value] += 1
        msg = self._sign(node, XPrepare(tx, view, c.seq, plan.coordinator, plan.shards, plan.path.value, node))
        __log__.debug(f"XSHARD | tx {tx.short_id}: {plan.path.value} path over shards {list(plan.shards)}")
        for shard in plan.shards:
            self._multicast(node, self._members(shard), msg)
            self.network.call_later(self.deadline(shard), lambda s=shard: self._prepare_timeout(tx.id, s))

    def _prepare_timeout(self, tx_id: TxId, shard: ShardId) -> None:
        c = self.coordinations.get(tx_id)
        if c is None or c.done or c.decision is not None or shard in c.certs or c.node in self.network.crashed:
            return
        if c.plan.path is Path.FAST:
            __log__.info(f"XSHARD | tx {tx_id.hex()[:12]}: shard {shard} slow on the fast path, waiting for recovery")
            return
        if len(c.certs) >= commit_quorum(len(c.plan.shards)):
            if c.tentative is None:
                self._send_commit(c, full=False)
                deadline = self.deadline(shard)
                self.network.call_later(deadline, lambda: self._commit_timeout(tx_id))
            return
        self.abort(tx_id, str(ShardTimeout(f"shard {shard} did not prepare in time")))

    def _commit_timeout(self, tx_id: TxId) -> None:
        c = self.coordinations.get(tx_id)
        if c is None or c.done or c.decision is not None or c.node in self.network.crashed:
            return
        self.abort(tx_id, str(CommitPhaseTimeout(f"{len(c.committed)}/{len(c.plan.shards)} shards committed")))

    def _send_commit(self, c: _Coordination, full: bool, only: Optional[ShardId] = None) -> None:
        certs = tuple(c.certs[s] for s in sorted(c.certs))
        msg = self._sign(c.node, XCommit(c.tx.id, c.view, c.seq, certs, full, c.node))
        if full:
            if not self.logs[c.plan.coordinator].record(c.tx.id, "commit"):
                return
            c.decision = "commit"
            c.decision_msg = msg
        else:
            c.tentative = msg
        for shard in ([only] if only is not None else c.plan.shards):
            self._multicast(c.node, self._members(shard), msg)

    def run_commit_and_execute(self, tx_id: TxId) -> None:
        """Issue the commit certificate once enough shard certificates are held."""
        c = self.coordinations[tx_id]
        if c.done or c.decision is not None:
            return
        if len(c.certs) == len(c.plan.shards):
            self._send_commit(c, full=True)
        elif c.tentative is not None:
            self._send_commit(c, full=False)

    def _on_shard_cert(self, node: NodeId, sc: ShardCertificate) -> None:
        c = self.coordinations.get(sc.tx_id)
        if c is None or c.node != node or c.done:
            return
        if not valid_shard_certificate(sc, self._members(sc.shard), self.keys):
            __log__.warning(f"XSHARD | invalid {sc.phase} certificate from shard {sc.shard}")
            return
        if sc.phase == NACK:
            self.abort(sc.tx_id, str(LocalValidationFailed(f"shard {sc.shard} voted abort")))
        elif sc.phase == PREPARED and c.plan.path is Path.NORMAL and sc.shard not in c.certs:
            c.certs[sc.shard] = sc
            observe_response(sc.shard, max(self.now - c.sent_at - self.round_trip, 0.0), self.timeouts)
            if c.decision is None:
                if len(c.certs) == len(c.plan.shards) and c.tentative is None:
                    self._send_commit(c, full=True)
                elif c.tentative is not None:
                    self._send_commit(c, full=False, only=sc.shard)
        elif sc.phase == COMMITTED and sc.shard not in c.committed:
            c.committed[sc.shard] = sc
            if len(c.committed) == len(c.plan.shards) and c.decision is None:
                if self.logs[c.plan.coordinator].record(c.tx.id, "commit"):
                    certs = tuple(c.committed[s] for s in sorted(c.committed))
                    msg = self._sign(c.node, XApply(c.tx.id, certs, c.node))
                    c.decision, c.decision_msg = "commit", msg
                    for shard in c.plan.shards:
                        self._multicast(c.node, self._members(shard), msg)
        elif sc.phase == EXECUTED and sc.shard not in c.receipts:
            c.receipts[sc.shard] = sc
            if len(c.receipts) == len(c.plan.shards):
                self._finish(c)

    def _finish(self, c: _Coordination) -> None:
        c.done = True
        applied = self.applied_at.get(c.tx.id, {})
        receipt = CrossShardReceipt(
            tx_id=c.tx.id,
            path=c.plan.path,
            coordinator=c.plan.coordinator,
            receipts=tuple(c.receipts[s] for s in sorted(c.receipts)),
            started_at=c.started_at,
            finished_at=self.now,
            applied_at=tuple(sorted(applied.items())),
        )
        self.archive.append(receipt)
        self.counts["committed"] += 1
        if self.on_resolved is not None:
            self.on_resolved(c.tx, True, "", self.now)

    def abort(self, tx_id: TxId, reason: str) -> None:
        """Broadcast the abort decision; no-op once a decision exists."""
        c = self.coordinations.get(tx_id)
        if c is None or c.done or c.decision == "abort":
            return
        if c.decision == "commit" or not self.logs[c.plan.coordinator].record(tx_id, "abort"):
            return
        msg = self._sign(c.node, XAbort(tx_id, reason, c.node))
        c.decision, c.decision_msg = "abort", msg
        for shard in c.plan.shards:
            self._multicast(c.node, self._members(shard), msg)
        self._conclude_abort(c, reason)

    def _conclude_abort(self, c: _Coordination, reason: str) -> None:
        if c.done:
            return
        c.done = True
        self.counts["aborted"] += 1
        __log__.info(f"XSHARD | tx {c.tx.short_id} aborted: {reason}")
        self.events.dispatch("on_aborted", CrossShardAborted(c.tx.id, reason, self.now))
        if self.on_resolved is not None:
            self.on_resolved(c.tx, False, reason, self.now)

    def _on_status(self, node: NodeId, msg: XStatus) -> None:
        c = self.coordinations.get(msg.tx_id)
        if c is None or c.node != node or c.decision_msg is None:
            return
        self.counts["status"] += 1
        self._send(node, msg.asker, c.decision_msg)

    # -- participants

    def handle(self, node: NodeId, src: NodeId, msg) -> None:
        if node in self.network.crashed:
            return
        if isinstance(msg, XPrepare):
            self._on_prepare(node, msg)
        elif isinstance(msg, ShardVote):
            self._on_vote(node, msg)
        elif isinstance(msg, ShardCertificate):
            self._on_cert(node, msg)
        elif isinstance(msg, XCommit):
            self._on_commit(node, msg)
        elif isinstance(msg, XApply):
            self._on_apply(node, msg)
        elif isinstance(msg, XAbort):
            self._on_abort(node, msg)
        elif isinstance(msg, XStatus):
            self._on_status(node, msg)

    def _participant(self, node: NodeId, tx_id: TxId) -> Optional[_Participant]:
        shard = self.plan.shard_of(node)
        return self.participants.get((shard, tx_id))

    def _validate(self, p: _Participant) -> Tuple[bool, str]:
        tx = p.tx
        if self.committed is not None:
            if any(not self.committed(d) for d in tx.explicit_parents):
                return False, "local parents not committed"
        mine = [o for o in tx.touched if self.owners.get(o) == p.shard]
        reads = [o for o in mine if o in tx.read_set and o not in tx.writes]
        writes = [o for o in mine if o in tx.writes]
        if not self.locks[p.shard].acquire(tx.id, reads, writes):
            return False, "lock conflict"
        return True, ""

    def _on_prepare(self, node: NodeId, msg: XPrepare) -> None:
        if not self._verify(msg):
            return
        shard = self.plan.shard_of(node)
        key = (shard, msg.tx.id)
        p = self.participants.get(key)
        if p is None:
            p = _Participant(msg.tx, shard, msg.shards, msg.sender, Path(msg.path),
                             backoff=ExponentialBackoff(self.timeouts.timeout(shard), seed=self.seed ^ msg.seq))
            self.participants[key] = p
            p.valid, p.reason = self._validate(p)
            if p.valid:
                self.ledgers[shard].speculate(msg.tx)
                p.status = "prepared"
            else:
                __log__.info(f"XSHARD | shard {shard} votes abort on tx {msg.tx.short_id}: {p.reason}")
            wait = 2 * self.deadline(shard)
            self.network.call_later(wait, lambda: self._unilateral_abort(p))
        if p.resolved:
            return
        ok = bool(p.valid) and self._authorized(node, msg.tx.auth_level)
        self._cast(node, p, PREPARED if ok else NACK, ok)

    def _cast(self, node: NodeId, p: _Participant, phase: str, ok: bool = True) -> None:
        if phase in (PREPARED, NACK):
            if (PREPARED, node) in p.cast or (NACK, node) in p.cast:
                return
        elif (phase, node) in p.cast:
            return
        p.cast.add((phase, node))
        vote = ShardVote(p.tx.id, p.shard, phase, ok, node)
        vote = dataclasses.replace(vote, signature=sign(self.pairs[node], vote.vote, self.keys.scheme))
        self._multicast(node, self._members(p.shard), vote)

    def _on_vote(self, node: NodeId, vote: ShardVote) -> None:
        p = self._participant(node, vote.tx_id)
        if p is None or p.status == "aborted" or vote.shard != p.shard or vote.signer not in self._members(p.shard):
            return
        # replicas that lag the first apply still need COMMITTED and EXECUTED quorums
        if p.resolved and vote.phase not in (COMMITTED, EXECUTED):
            return
        if not self.keys.verify(vote.vote, vote.signature, self._key(vote.signer)):
            return
        if not self._authorized(vote.signer, p.tx.auth_level):
            return
        bucket = p.votes.setdefault((vote.phase if vote.ok else NACK, node), {})
        bucket.setdefault(vote.signer, vote)
        self._try_form(node, p, vote.phase if vote.ok else NACK)

    def _try_form(self, node: NodeId, p: _Participant, phase: str) -> None:
        if (phase, node) in p.formed:
            return
        votes = p.votes.get((phase, node), {})
        n = len(self._members(p.shard))
        need = max_faulty(n) + 1 if phase == NACK else quorum_size(n)
        if len(votes) < need:
            return
        p.formed.add((phase, node))
        ok = phase != NACK
        sigs = [votes[s].signature for s in sorted(votes)]
        keys = {s: self._key(s) for s in votes}
        cert = aggregate(sigs, need, digest=shard_vote_digest(phase, p.tx.id, p.shard, ok),
                         registry=self.keys, keys=keys)
        sc = ShardCertificate(p.tx.id, p.shard, phase, cert)
        if phase == PREPARED:
            p.voted = True
            p.certs[p.shard] = sc
            if p.path is Path.FAST:
                for shard in p.shards:
                    self._multicast(node, self._members(shard), sc)
            else:
                self._send(node, p.coordinator_node, sc)
        elif phase == NACK:
            self._send(node, p.coordinator_node, sc)
        elif phase == COMMITTED:
            if p.path is Path.FAST or p.full_commit:
                self._apply(p)
                self._cast(node, p, EXECUTED)
            else:
                self._send(node, p.coordinator_node, sc)
        elif phase == EXECUTED:
            self._send(node, p.coordinator_node, sc)
        if phase == PREPARED and not p.resolved:
            self.network.call_later(self.deadline(p.shard), lambda: self._query_status(node, p))

    def _on_cert(self, node: NodeId, sc: ShardCertificate) -> None:
        c = self.coordinations.get(sc.tx_id)
        if c is not None and c.node == node and (c.plan.path is Path.NORMAL or sc.phase in (NACK, EXECUTED)):
            self._on_shard_cert(node, sc)
        if sc.phase != PREPARED:
            return
        p = self._participant(node, sc.tx_id)
        if p is None or p.resolved or p.path is not Path.FAST:
            return
        if not valid_shard_certificate(sc, self._members(sc.shard), self.keys):
            return
        p.certs.setdefault(sc.shard, sc)
        seen = p.node_certs.setdefault(node, set())
        seen.add(sc.shard)
        if seen >= set(p.shards) and p.status == "prepared":
            self._cast(node, p, COMMITTED)

    def _on_commit(self, node: NodeId, msg: XCommit) -> None:
        p = self._participant(node, msg.tx_id)
        if p is None or p.resolved or not self._verify(msg):
            return
        if len(msg.certs) < commit_quorum(len(p.shards)):
            return
        if not all(valid_shard_certificate(sc, self._members(sc.shard), self.keys) for sc in msg.certs):
            return
        if msg.full:
            if len({sc.shard for sc in msg.certs}) != len(p.shards):
                return
            p.full_commit = True
            if any(tag[0] == COMMITTED and tag[1] == node for tag in p.formed):
                self._apply(p)
                self._cast(node, p, EXECUTED)
        if p.status == "prepared":
            self._cast(node, p, COMMITTED)
            self._try_form(node, p, COMMITTED)

    def _on_apply(self, node: NodeId, msg: XApply) -> None:
        p = self._participant(node, msg.tx_id)
        if p is None or p.status == "aborted" or not self._verify(msg):
            return
        if {sc.shard for sc in msg.certs} != set(p.shards):
            return
        if not all(sc.phase == COMMITTED and valid_shard_certificate(sc, self._members(sc.shard), self.keys)
                   for sc in msg.certs):
            return
        p.apply_signal = True
        self._apply(p)
        self._cast(node, p, EXECUTED)

    def _on_abort(self, node: NodeId, msg: XAbort) -> None:
        p = self._participant(node, msg.tx_id)
        if p is None or p.status == "applied" or not self._verify(msg):
            return
        self._local_abort(p, msg.reason)

    def _apply(self, p: _Participant) -> None:
        if p.status == "applied":
            return
        if p.status == "aborted":
            raise XShardError(f"tx {p.tx.short_id}: apply after abort on shard {p.shard}")
        ledger = self.ledgers[p.shard]
        if p.status == "prepared" and not ledger.is_resolved(p.tx.id):
            ledger.release(p.tx.id)
        self.locks[p.shard].release(p.tx.id)
        p.status = "applied"
        self.applied_at.setdefault(p.tx.id, {})[p.shard] = self.now
        if self.on_applied is not None:
            self.on_applied(p.shard, p.tx)

    def _local_abort(self, p: _Participant, reason: str) -> None:
        if p.resolved:
            return
        if p.status == "prepared":
            self.ledgers[p.shard].revert(p.tx.id)
            self.locks[p.shard].release(p.tx.id)
        p.status = "aborted"
        p.reason = reason

    def _unilateral_abort(self, p: _Participant) -> None:
        if p.resolved or p.voted:
            return
        __log__.info(f"XSHARD | shard {p.shard} aborts tx {p.tx.short_id} unilaterally (never voted)")
        self._local_abort(p, "participant timeout")

    def _query_status(self, node: NodeId, p: _Participant) -> None:
        if p.resolved or node in self.network.crashed or p.status_queries >= STATUS_RETRIES:
            return
        p.status_queries += 1
        self._send(node, p.coordinator_node, XStatus(p.tx.id, p.shard, node))
        self.network.call_later(p.backoff.delay(), lambda: self._query_status(node, p))

    # -- epoch boundary

    def recover(self) -> Dict[TxId, bool]:
        """Cooperative termination of every unresolved transaction.

        Commit when some participant applied or holds every shard certificate or
        the coordinator logged a commit; otherwise abort.
        """
        outcome: Dict[TxId, bool] = {}
        by_tx: Dict[TxId, List[_Participant]] = {}
        for (shard, tx_id), p in self.participants.items():
            by_tx.setdefault(tx_id, []).append(p)
        for tx_id, c in self.coordinations.items():
            parts = by_tx.get(tx_id, [])
            if c.done and all(p.resolved for p in parts):
                continue
            commit = (
                c.decision == "commit"
                or any(p.status == "applied" for p in parts)
                or any(p.apply_signal or len(p.certs) == len(c.plan.shards) and p.path is Path.FAST for p in parts)
            )
            if commit and not all(p.status in ("prepared", "applied") for p in parts) or \
                    commit and len(parts) < len(c.plan.shards):
                __log__.error(f"XSHARD | tx {c.tx.short_id}: commit decision with unprepared shards, aborting")
                commit = any(p.status == "applied" for p in parts)
            for p in parts:
                if commit:
                    self._apply(p)
                else:
                    self._local_abort(p, "epoch recovery")
            if not c.done:
                if commit:
                    c.done = True
                    self.counts["committed"] += 1
                    applied = self.applied_at.get(tx_id, {})
                    self.archive.append(CrossShardReceipt(tx_id, c.plan.path, c.plan.coordinator, (), c.started_at,
                                                          self.now, tuple(sorted(applied.items()))))
                    if self.on_resolved is not None:
                        self.on_resolved(c.tx, True, "", self.now)
                else:
                    self.logs[c.plan.coordinator].record(tx_id, "abort")
                    c.decision = "abort"
                    self._conclude_abort(c, "epoch recovery")
            outcome[tx_id] = commit
        if outcome:
            __log__.info(f"XSHARD | epoch recovery resolved {len(outcome)} transactions "
                         f"({sum(outcome.values())} committed)")
        return outcome

    def reset_epoch(self) -> None:
        """Drop resolved state; recovery must have run."""
        self.participants = {k: p for k, p in self.participants.items() if not p.resolved}
        self.coordinations = {k: c for k, c in self.coordinations.items() if not c.done}

    def outcome_of(self, tx_id: TxId) -> Dict[ShardId, str]:
        return {shard: p.status for (shard, t), p in self.participants.items() if t == tx_id}
