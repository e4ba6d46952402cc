# -*- coding: utf-8 -*-
"""Intra-shard PBFT with DDID-gated quorums.

A :class:`Replica` is a deterministic state machine: :meth:`Replica.on_message`
consumes one message and returns an :class:`Outcome` with the votes to
broadcast, a :class:`FinalizedBatch` once the commit quorum is reached and
equivocation evidence when the leader signed two batches for one slot.

There is no view-change subprotocol. Views advance at epoch boundaries with
:func:`rotate_leader`; batches that did not finalize come back as failed.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

from .crypto import KeyPair, KeyRegistry, PublicKey, Signature, ThresholdCertificate, aggregate, max_faulty, \
    quorum_size, sign
from .errors import BadSignature, DigestMismatch, LeaderUnauthorized, NotLeader, PbftError, UnknownKey, \
    UnknownNode, UnknownSigner
from .model import UNSIGNED, Block, Digest, NodeId, ShardId, Transaction, TxId, batch_digest, canonical, \
    canonical_bytes, digest, signing_bytes

__log__ = logging.getLogger(__name__)

PREPARE = "prepare"
COMMIT = "commit"

A_MIN = 1


def vote_digest(phase: str, shard: ShardId, view: int, seq: int, batch: Digest) -> Digest:
    """What prepare and commit signatures cover; the view doubles as the epoch."""
    return digest(canonical_bytes((phase, shard, view, seq, batch)))


class Phase(IntEnum):
    IDLE = 0
    PRE_PREPARED = 1
    PREPARED = 2
    COMMITTED = 3


@canonical
@dataclass(frozen=True)
class PrePrepare:

    shard: ShardId
    view: int
    seq: int
    digest: Digest
    txs: Tuple[Transaction, ...]
    leader: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)

    @property
    def slot(self) -> Tuple[int, int]:
        return self.view, self.seq


@canonical
@dataclass(frozen=True)
class Prepare:

    shard: ShardId
    view: int
    seq: int
    digest: Digest
    signer: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)

    phase = PREPARE

    @property
    def vote(self) -> Digest:
        return vote_digest(self.phase, self.shard, self.view, self.seq, self.digest)


@canonical
@dataclass(frozen=True)
class Commit:

    shard: ShardId
    view: int
    seq: int
    digest: Digest
    signer: NodeId
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)

    phase = COMMIT

    @property
    def vote(self) -> Digest:
        return vote_digest(self.phase, self.shard, self.view, self.seq, self.digest)


@dataclass(frozen=True)
class Evidence:
    """Two leader-signed pre-prepares for one (view, seq) slot."""

    shard: ShardId
    view: int
    seq: int
    leader: NodeId
    digests: Tuple[Digest, Digest]


class FinalizedBatch(NamedTuple):
    shard: ShardId
    view: int
    seq: int
    digest: Digest
    txs: Tuple[Transaction, ...]
    prepare_cert: ThresholdCertificate
    commit_cert: ThresholdCertificate

    def to_block(self) -> Block:
        return Block(shard=self.shard, epoch=self.view, seq=self.seq, txs=self.txs)


class Outcome(NamedTuple):
    outbound: List[object]
    finalized: Optional[FinalizedBatch] = None
    evidence: Optional[Evidence] = None
    invalid: Tuple[TxId, ...] = ()


@dataclass
class PbftState:

    shard: ShardId
    members: Tuple[NodeId, ...]
    leader: NodeId
    view: int = 0
    seq: int = 0
    phases: Dict[Tuple[int, int], Phase] = field(default_factory=dict)
    log: Dict[Tuple[int, int, str, NodeId], object] = field(default_factory=dict)
    accepted: Dict[Tuple[int, int], PrePrepare] = field(default_factory=dict)

    @property
    def f(self) -> int:
        return max_faulty(len(self.members))

    @property
    def quorum(self) -> int:
        return quorum_size(len(self.members))

    def phase(self, view: int, seq: int) -> Phase:
        return self.phases.get((view, seq), Phase.IDLE)

    def pending(self) -> List[PrePrepare]:
        """Accepted batches of the current view that have not committed."""
        return [pp for slot, pp in sorted(self.accepted.items())
                if slot[0] == self.view and self.phase(*slot) < Phase.COMMITTED]


def equivocation_check(a: PrePrepare, b: PrePrepare) -> Optional[Evidence]:
    if (a.shard, a.view, a.seq, a.leader) != (b.shard, b.view, b.seq, b.leader) or a.digest == b.digest:
        return None
    return Evidence(a.shard, a.view, a.seq, a.leader, tuple(sorted((a.digest, b.digest))))


def rotate_leader(state: PbftState, reputations: Mapping[NodeId, float], *, committee: Iterable[NodeId] = (),
                  flagged: Iterable[NodeId] = (), next_seq: Optional[int] = None) -> PbftState:
    """Advance the view and pick the next leader.

    The leader is the highest-reputation committee member of the shard that was
    not flagged this epoch, else the best unflagged shard member, else the best
    member overall.
    """
    flagged = set(flagged)
    rank = lambda n: (-reputations.get(n, 0.0), n)
    in_committee = [n for n in state.members if n in set(committee) and n not in flagged]
    unflagged = [n for n in state.members if n not in flagged]
    pool = in_committee or unflagged or list(state.members)
    leader = min(pool, key=rank)
    seq = state.seq if next_seq is None else max(state.seq, next_seq)
    if leader != state.leader:
        __log__.info(f"PBFT | shard {state.shard}: leader {state.leader} -> {leader} at view {state.view + 1}")
    return PbftState(shard=state.shard, members=state.members, leader=leader, view=state.view + 1, seq=seq)


class Replica:
    """One control-plane replica of a shard.

    Parameters
    ----------
    node: int
        This replica's node id.
    state: PbftState
        Membership, leader and view.
    keypair: KeyPair
        Signs this replica's votes and, when leading, pre-prepares.
    keys: KeyRegistry
        Fallback verification keys.
    registry: Optional[DdidRegistry]
        DDID gate for quorum counting; ``None`` counts every member.
    clock: Callable[[], float]
        Simulated time for temporal scope checks.
    committed: Callable[[bytes], bool]
        Whether a transaction id has already committed anywhere.
    check_tx_signatures: bool
        Re-verify every sender signature; off only for unsigned synthetic batches.
    """

    def __init__(self, node: NodeId, state: PbftState, keypair: KeyPair, keys: KeyRegistry, registry=None, *,
                 clock: Callable[[], float] = lambda: 0.0, committed: Optional[Callable[[TxId], bool]] = None,
                 a_min: int = A_MIN, check_tx_signatures: bool = True):
        self.node = node
        self.state = state
        self.keypair = keypair
        self.keys = keys
        self.registry = registry
        self.clock = clock
        self.committed = committed
        self.a_min = a_min
        self.check_tx_signatures = check_tx_signatures
        self.outbox: List[object] = []
        self.evidence: Dict[Tuple[int, int], Evidence] = {}
        self.finalized: Dict[int, FinalizedBatch] = {}
        self.counts = {"pre-prepare": 0, PREPARE: 0, COMMIT: 0}
        self.proposed_at: Dict[int, float] = {}

    def __repr__(self):
        return f"<Replica node={self.node} shard={self.state.shard} view={self.state.view}>"

    @property
    def is_leader(self) -> bool:
        return self.state.leader == self.node

    @property
    def in_flight(self) -> bool:
        return bool(self.state.pending())

    # -- keys and authorization

    def _key(self, node: NodeId) -> PublicKey:
        try:
            if self.registry is not None and node in self.registry:
                return self.registry.key_of(node)
            return self.keys.public_key(node)
        except UnknownKey:
            raise UnknownSigner(f"no key for node {node}")

    def _authorized(self, node: NodeId, level: int) -> bool:
        if self.registry is None:
            return True
        try:
            return self.registry.authorized(node, level, self.clock())
        except UnknownNode:
            return False

    @staticmethod
    def batch_level(txs: Sequence[Transaction]) -> int:
        return max((t.auth_level for t in txs), default=0)

    def _sign_vote(self, cls, pp: PrePrepare):
        vote = cls(shard=pp.shard, view=pp.view, seq=pp.seq, digest=pp.digest, signer=self.node)
        return dataclasses.replace(vote, signature=sign(self.keypair, vote.vote, self.keys.scheme))

    # -- validation

    def validate_batch(self, txs: Sequence[Transaction]) -> List[TxId]:
        """Ids of transactions this replica refuses to prepare.

        A transaction passes when its id is intact, it carries its sender's
        signature, a sender holding a DDID is authorized for its level, this
        replica is authorized for it and its local parents are committed.
        """
        bad = []
        seen: Set[TxId] = set()
        now = self.clock()
        for tx in txs:
            ok = tx.id_valid and tx.id not in seen
            if ok and self.check_tx_signatures:
                sig = tx.sender_sig
                ok = sig is not None and sig.signer == tx.source and self.keys.verify(tx.id, sig)
            if ok and self.registry is not None:
                # accounts without a DDID are authenticated by their signature alone
                if tx.source in self.registry:
                    ok = self.registry.auth_check(tx.source, tx, now)
                if ok and self.node in self.registry:
                    ok = self.registry.auth_check(self.node, tx, now)
            if ok and self.committed is not None:
                ok = all(p in seen or self.committed(p) for p in tx.explicit_parents)
            if not ok:
                bad.append(tx.id)
            seen.add(tx.id)
        return bad

    # -- leader

    def leader_propose(self, batch: Sequence[Transaction]) -> PrePrepare:
        if not self.is_leader:
            raise NotLeader(f"node {self.node} is not the leader of shard {self.state.shard} in view {self.state.view}")
        if not self._authorized(self.node, self.a_min):
            raise LeaderUnauthorized(f"leader {self.node} fails the authorization check at level {self.a_min}")
        if self.in_flight:
            raise PbftError(f"shard {self.state.shard}: a batch is already in flight")
        pp = self._make_pre_prepare(tuple(batch), self.state.seq)
        self.proposed_at[pp.seq] = self.clock()
        self.outbox.append(pp)
        self._accept(pp)
        return pp

    def _make_pre_prepare(self, txs: Tuple[Transaction, ...], seq: int) -> PrePrepare:
        pp = PrePrepare(shard=self.state.shard, view=self.state.view, seq=seq, digest=batch_digest(txs),
                        txs=txs, leader=self.node)
        return dataclasses.replace(pp, signature=sign(self.keypair, signing_bytes(pp), self.keys.scheme))

    def equivocate(self, batch_a: Sequence[Transaction], batch_b: Sequence[Transaction]) -> Tuple[PrePrepare, PrePrepare]:
        """Byzantine leader: two signed pre-prepares for the same slot. Nothing is logged locally."""
        seq = self.state.seq
        return self._make_pre_prepare(tuple(batch_a), seq), self._make_pre_prepare(tuple(batch_b), seq)

    def drain(self) -> List[object]:
        out, self.outbox = self.outbox, []
        return out

    # -- messages

    def on_message(self, msg) -> Outcome:
        if msg.shard != self.state.shard or msg.view != self.state.view:
            __log__.debug(f"PBFT | node {self.node}: ignoring {type(msg).__name__} for view {msg.view}")
            return Outcome(self.drain())
        if isinstance(msg, PrePrepare):
            return self._on_pre_prepare(msg)
        if isinstance(msg, (Prepare, Commit)):
            return self._on_vote(msg)
        raise PbftError(f"unexpected message {type(msg).__name__}")

    def _on_pre_prepare(self, pp: PrePrepare) -> Outcome:
        self.counts["pre-prepare"] += 1
        if pp.leader != self.state.leader:
            raise NotLeader(f"pre-prepare from {pp.leader}, leader is {self.state.leader}")
        if not self.keys.verify(signing_bytes(pp), pp.signature, self._key(pp.leader)):
            raise BadSignature(f"pre-prepare {pp.slot} from {pp.leader}")
        prior = self.state.accepted.get(pp.slot)
        if prior is not None:
            ev = equivocation_check(prior, pp)
            if ev is None or pp.slot in self.evidence:
                return Outcome(self.drain())
            self.evidence[pp.slot] = ev
            __log__.warning(f"PBFT | shard {pp.shard}: leader {pp.leader} equivocated at view {pp.view} seq {pp.seq}")
            raise DigestMismatch(ev)
        if not self._authorized(pp.leader, self.a_min):
            raise LeaderUnauthorized(f"leader {pp.leader} fails the authorization check at level {self.a_min}")
        if pp.digest != batch_digest(pp.txs):
            raise PbftError(f"pre-prepare {pp.slot}: digest does not match the batch")
        if pp.seq < self.state.seq:
            return Outcome(self.drain())
        bad = self.validate_batch(pp.txs)
        if bad:
            __log__.info(f"PBFT | node {self.node}: refusing batch {pp.slot}, {len(bad)} invalid transactions")
            return Outcome(self.drain(), invalid=tuple(bad))
        return self._accept(pp)

    def _accept(self, pp: PrePrepare) -> Outcome:
        self.state.accepted[pp.slot] = pp
        self.state.phases[pp.slot] = Phase.PRE_PREPARED
        self._emit(self._sign_vote(Prepare, pp))
        return self._progress(pp)

    def _emit(self, vote) -> None:
        self.state.log[(vote.view, vote.seq, vote.phase, vote.signer)] = vote
        self.outbox.append(vote)

    def _on_vote(self, vote) -> Outcome:
        self.counts[vote.phase] += 1
        if vote.signer not in self.state.members:
            raise UnknownSigner(f"node {vote.signer} is not in shard {self.state.shard}")
        if not self.keys.verify(vote.vote, vote.signature, self._key(vote.signer)):
            raise BadSignature(f"{vote.phase} from {vote.signer} at {vote.view}/{vote.seq}")
        key = (vote.view, vote.seq, vote.phase, vote.signer)
        if key in self.state.log:
            return Outcome(self.drain())
        self.state.log[key] = vote
        pp = self.state.accepted.get((vote.view, vote.seq))
        if pp is None:
            return Outcome(self.drain())
        return self._progress(pp)

    def _voters(self, pp: PrePrepare, phase: str) -> List:
        level = self.batch_level(pp.txs)
        out = []
        for signer in self.state.members:
            vote = self.state.log.get((pp.view, pp.seq, phase, signer))
            if vote is not None and vote.digest == pp.digest and self._authorized(signer, level):
                out.append(vote)
        return out

    def _progress(self, pp: PrePrepare) -> Outcome:
        finalized = None
        quorum = self.state.quorum
        if self.state.phase(*pp.slot) == Phase.PRE_PREPARED and len(self._voters(pp, PREPARE)) >= quorum:
            self.state.phases[pp.slot] = Phase.PREPARED
            self._emit(self._sign_vote(Commit, pp))
        if self.state.phase(*pp.slot) == Phase.PREPARED:
            commits = self._voters(pp, COMMIT)
            if len(commits) >= quorum:
                self.state.phases[pp.slot] = Phase.COMMITTED
                finalized = self._finalize(pp, commits)
        return Outcome(self.drain(), finalized)

    def _certificate(self, votes: Sequence, vote_digest_: Digest) -> ThresholdCertificate:
        sigs = [v.signature for v in votes]
        keys = {v.signer: self._key(v.signer) for v in votes}
        return aggregate(sigs, self.state.quorum, digest=vote_digest_, registry=self.keys, keys=keys)

    def _finalize(self, pp: PrePrepare, commits: Sequence) -> FinalizedBatch:
        prepares = self._voters(pp, PREPARE)
        batch = FinalizedBatch(
            shard=pp.shard,
            view=pp.view,
            seq=pp.seq,
            digest=pp.digest,
            txs=pp.txs,
            prepare_cert=self._certificate(prepares, vote_digest(PREPARE, pp.shard, pp.view, pp.seq, pp.digest)),
            commit_cert=self._certificate(commits, vote_digest(COMMIT, pp.shard, pp.view, pp.seq, pp.digest)),
        )
        self.finalized[pp.seq] = batch
        self.state.seq = max(self.state.seq, pp.seq + 1)
        __log__.debug(f"PBFT | node {self.node}: finalized shard {pp.shard} seq {pp.seq} ({len(pp.txs)} txs)")
        return batch

    # -- epoch boundary

    def rotate(self, reputations: Mapping[NodeId, float], *, committee: Iterable[NodeId] = (),
               flagged: Iterable[NodeId] = (), next_seq: Optional[int] = None) -> List[Transaction]:
        """Move to the next view; returns the transactions of batches that did not finalize."""
        failed = [tx for pp in self.state.pending() for tx in pp.txs]
        self.state = rotate_leader(self.state, reputations, committee=committee, flagged=flagged, next_seq=next_seq)
        self.outbox.clear()
        return failed
