# -*- coding: utf-8 -*-
"""Dynamic Decentralized Identifier registry.

Documents are versioned. Administrative changes go through the Dynamic Updates
Controller flow (propose, approve, execute) and need ``t`` distinct controller
approvals; reputation is system-maintained and versioned without approval.
Every committed version is kept in an off-chain :class:`ContentStore` and the
registry anchors the digest of the head version.
"""
from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple

from .crypto import KeyPair, KeyRegistry, PublicKey, Signature, sign
from .errors import (AlreadyRevoked, BelowApprovalThreshold, CorruptArtifact, DuplicateSubject, InvalidUpdate,
                     MalformedDdid, RevokedTarget, StaleProposal, UnauthorizedIssuer, UnauthorizedProposer,
                     UnknownKey, UnknownNode)
from .events import DocumentUpdated, Emitter, ReconfigurationTrigger
from .model import (UNSIGNED, ZERO_DIGEST, ConsortiumId, Digest, NodeId, Transaction, canonical, canonical_bytes,
                    decode, digest, signing_bytes)

__log__ = logging.getLogger(__name__)

# scope names
VALIDATE = "validate"
DATA_READ = "data-read"
REVOKE = "revoke"
ADMIN = "admin"

DDID_RE = re.compile(r"^ddid:([A-Za-z0-9][A-Za-z0-9._-]*):([0-9a-f]{12})$")
UPDATABLE_FIELDS = ("authorization_scopes", "temporal_constraints", "consortium", "auth_key")


@canonical
@dataclass(frozen=True)
class Scope:

    name: str
    rank: int


@canonical
@dataclass(frozen=True)
class TemporalConstraint:

    scope: str
    valid_from: float
    valid_until: float

    def brackets(self, now: float) -> bool:
        return self.valid_from <= now <= self.valid_until


@canonical
@dataclass(frozen=True)
class DdidDocument:

    ddid: str
    subject: NodeId
    auth_key: PublicKey
    authorization_scopes: frozenset
    consortium: ConsortiumId
    reputation: float = 0.5
    temporal_constraints: Tuple[TemporalConstraint, ...] = ()
    version: int = 1
    prev_version_hash: Digest = ZERO_DIGEST
    revoked: bool = False
    update_kind: str = "create"

    @property
    def version_hash(self) -> Digest:
        return digest(canonical_bytes(self))

    def scope_valid(self, scope: Scope, now: float) -> bool:
        windows = [c for c in self.temporal_constraints if c.scope == scope.name]
        return not windows or any(c.brackets(now) for c in windows)

    def has_scope(self, name: str, now: float) -> bool:
        return not self.revoked and any(s.name == name and self.scope_valid(s, now) for s in self.authorization_scopes)


@canonical
@dataclass(frozen=True)
class UpdateProposal:
    """A field-delta proposal; approvals sign ``proposal.digest``."""

    target: str
    deltas: Tuple[Tuple[str, object], ...]
    proposer: NodeId
    base_version: int
    required_threshold: int
    approvals: frozenset = field(default=frozenset(), metadata=UNSIGNED)

    @property
    def digest(self) -> Digest:
        return digest(signing_bytes(self))

    def approve(self, keypair: KeyPair) -> "UpdateProposal":
        return dataclasses.replace(self, approvals=self.approvals | {sign(keypair, self.digest)})


@canonical
@dataclass(frozen=True)
class RevocationCertificate:

    target: str
    issuer: NodeId
    issued_at: float
    signature: Optional[Signature] = field(default=None, metadata=UNSIGNED)

    @property
    def digest(self) -> Digest:
        return digest(signing_bytes(self))

    @classmethod
    def issue(cls, target: str, issuer: KeyPair, issued_at: float) -> "RevocationCertificate":
        cert = cls(target=target, issuer=issuer.owner, issued_at=issued_at)
        return dataclasses.replace(cert, signature=sign(issuer, cert.digest))


@dataclass(frozen=True)
class ReputationSignal:

    validated_ok: bool
    uptime_fraction: float
    participated: bool


def parse_ddid(value: str) -> Tuple[str, str]:
    """``"ddid:bri-lab:f2e8d7c9b3a4"`` -> ``("bri-lab", "f2e8d7c9b3a4")``."""
    match = DDID_RE.match(value)
    if not match:
        raise MalformedDdid(f"not a ddid: {value!r}")
    return match.group(1), match.group(2)


def _scopes(scopes: Iterable) -> frozenset:
    out = set()
    for s in scopes:
        if isinstance(s, Scope):
            out.add(s)
        else:
            name, rank = s
            out.add(Scope(str(name), int(rank)))
    return frozenset(out)


class ContentStore:
    """In-process content-addressed store standing in for off-chain storage."""

    def __init__(self):
        self._blobs: Dict[Digest, bytes] = {}

    def put(self, data: bytes) -> Digest:
        key = digest(data)
        self._blobs[key] = data
        return key

    def get(self, key: Digest) -> bytes:
        return self._blobs[key]

    def __contains__(self, key: Digest) -> bool:
        return key in self._blobs

    def __len__(self):
        return len(self._blobs)

    @property
    def stored_bytes(self) -> int:
        return sum(len(b) for b in self._blobs.values())


class DdidRegistry:
    """Single-writer DDID store with the DUC flow, revocation and authorization checks.

    Parameters
    ----------
    keys: KeyRegistry
        Fallback keys for controllers that have no DDID of their own.
    root_nodes: Iterable[int]
        Root-plane nodes; controllers of every document.
    admins: Mapping[str, Iterable[int]]
        Consortium admins; controllers of documents in their consortium.
    threshold: int
        ``t`` of the t-of-n approval rule.
    alpha: float
        EWMA weight of the reputation update.
    """

    def __init__(self, keys: KeyRegistry, *, root_nodes: Iterable[NodeId] = (),
                 admins: Optional[Mapping[ConsortiumId, Iterable[NodeId]]] = None, threshold: int = 2,
                 alpha: float = 0.9, score_weights: Tuple[float, float, float] = (0.5, 0.3, 0.2),
                 initial_reputation: float = 0.5, store: Optional[ContentStore] = None):
        self.keys = keys
        self.root_nodes = frozenset(root_nodes)
        self.admins = {c: frozenset(a) for c, a in (admins or {}).items()}
        self.threshold = threshold
        self.alpha = alpha
        self.score_weights = score_weights
        self.initial_reputation = initial_reputation
        self.store = store or ContentStore()
        self.events = Emitter()
        self._docs: Dict[str, DdidDocument] = {}
        self._history: Dict[str, List[Digest]] = {}
        self._by_subject: Dict[NodeId, str] = {}
        self.anchors: Dict[str, Digest] = {}
        self.revoked: Set[str] = set()
        self.stats = {"create": 0, "update": 0, "reputation": 0, "revocation": 0, "auth_check": 0}

    # -- lookup

    def resolve(self, ddid: str) -> DdidDocument:
        parse_ddid(ddid)
        try:
            return self._docs[ddid]
        except KeyError:
            raise UnknownNode(f"no document {ddid}")

    def document_of(self, node: NodeId) -> DdidDocument:
        try:
            return self._docs[self._by_subject[node]]
        except KeyError:
            raise UnknownNode(f"node {node} has no DDID")

    def __contains__(self, node: NodeId) -> bool:
        return node in self._by_subject

    def __len__(self):
        return len(self._docs)

    def history(self, ddid: str) -> List[DdidDocument]:
        self.resolve(ddid)
        return [decode(self.store.get(h)) for h in self._history[ddid]]

    def controllers(self, doc: DdidDocument) -> frozenset:
        return self.root_nodes | self.admins.get(doc.consortium, frozenset())

    def key_of(self, node: NodeId) -> PublicKey:
        """Identity-bound key: the DDID auth key when the node has a live document."""
        ddid = self._by_subject.get(node)
        if ddid is not None and not self._docs[ddid].revoked:
            return self._docs[ddid].auth_key
        return self.keys.public_key(node)

    # -- lifecycle

    def _commit(self, doc: DdidDocument) -> DdidDocument:
        key = self.store.put(canonical_bytes(doc))
        self._docs[doc.ddid] = doc
        self._history.setdefault(doc.ddid, []).append(key)
        self.anchors[doc.ddid] = key
        self.events.dispatch("on_updated", DocumentUpdated(doc.ddid, doc.version, doc.update_kind))
        return doc

    def _successor(self, doc: DdidDocument, kind: str, **changes) -> DdidDocument:
        return dataclasses.replace(doc, version=doc.version + 1, prev_version_hash=doc.version_hash,
                                   update_kind=kind, **changes)

    def create_ddid(self, subject: NodeId, consortium: ConsortiumId, scopes: Iterable, key: PublicKey, now: float,
                    constraints: Iterable[TemporalConstraint] = ()) -> DdidDocument:
        current = self._by_subject.get(subject)
        if current is not None and not self._docs[current].revoked:
            raise DuplicateSubject(f"node {subject} already bound to {current}")
        suffix = digest(canonical_bytes((subject, consortium, key.key, now)))[:6].hex()
        ddid = f"ddid:{consortium}:{suffix}"
        parse_ddid(ddid)
        doc = DdidDocument(
            ddid=ddid,
            subject=subject,
            auth_key=key,
            authorization_scopes=_scopes(scopes),
            consortium=consortium,
            reputation=self.initial_reputation,
            temporal_constraints=tuple(constraints),
        )
        self._by_subject[subject] = ddid
        self.stats["create"] += 1
        __log__.debug(f"DDID | created {ddid} for node {subject}")
        return self._commit(doc)

    def propose_update(self, target: str, deltas: Mapping[str, object], proposer: NodeId) -> UpdateProposal:
        doc = self.resolve(target)
        if doc.revoked:
            raise RevokedTarget(f"{target} is revoked")
        self._check_proposer(doc, deltas, proposer)
        return UpdateProposal(
            target=target,
            deltas=tuple(sorted(self._normalise(deltas).items())),
            proposer=proposer,
            base_version=doc.version,
            required_threshold=self.threshold,
        )

    def approve_update(self, proposal: UpdateProposal, approver: KeyPair) -> UpdateProposal:
        doc = self.resolve(proposal.target)
        if approver.owner not in self.controllers(doc):
            raise UnauthorizedProposer(f"node {approver.owner} does not control {proposal.target}")
        return proposal.approve(approver)

    def valid_approvers(self, proposal: UpdateProposal, doc: DdidDocument) -> Set[NodeId]:
        controllers = self.controllers(doc)
        approvers = set()
        for sig in proposal.approvals:
            if sig.signer not in controllers:
                continue
            try:
                pk = self.key_of(sig.signer)
            except UnknownKey as e:
                __log__.debug(f"DDID | approval on {proposal.target} ignored: {e}")
                continue
            if self.keys.verify(proposal.digest, sig, pk):
                approvers.add(sig.signer)
        return approvers

    def execute_update(self, proposal: UpdateProposal) -> DdidDocument:
        doc = self.resolve(proposal.target)
        if doc.revoked:
            raise RevokedTarget(f"{proposal.target} is revoked")
        if doc.version != proposal.base_version:
            raise StaleProposal(f"{proposal.target} is at version {doc.version}, proposal built on {proposal.base_version}")
        deltas = dict(proposal.deltas)
        self._check_proposer(doc, deltas, proposal.proposer)
        need = max(proposal.required_threshold, self.threshold)
        have = len(self.valid_approvers(proposal, doc))
        if have < need:
            raise BelowApprovalThreshold(f"{have} valid approvals, {need} required")
        self.stats["update"] += 1
        new = self._commit(self._successor(doc, "governance", **self._normalise(deltas)))
        __log__.info(f"DDID | {new.ddid} updated to version {new.version} ({', '.join(deltas)})")
        return new

    def _check_proposer(self, doc: DdidDocument, deltas: Mapping[str, object], proposer: NodeId) -> None:
        if proposer not in self.controllers(doc):
            raise UnauthorizedProposer(f"node {proposer} does not control {doc.ddid}")
        if "consortium" in deltas and proposer not in self.root_nodes:
            raise UnauthorizedProposer("only root-plane controllers may change consortium affiliation")

    @staticmethod
    def _normalise(deltas: Mapping[str, object]) -> Dict[str, object]:
        out = {}
        for name, value in deltas.items():
            if name not in UPDATABLE_FIELDS:
                raise InvalidUpdate(f"field {name!r} cannot be updated")
            if name == "authorization_scopes":
                value = _scopes(value)
            elif name == "temporal_constraints":
                value = tuple(value)
                if not all(isinstance(c, TemporalConstraint) for c in value):
                    raise InvalidUpdate("temporal_constraints must hold TemporalConstraint values")
            elif name == "auth_key" and not isinstance(value, PublicKey):
                raise InvalidUpdate("auth_key must be a PublicKey")
            elif name == "consortium":
                parse_ddid(f"ddid:{value}:000000000000")
            out[name] = value
        return out

    def revoke(self, cert: RevocationCertificate) -> DdidDocument:
        doc = self.resolve(cert.target)
        try:
            issuer = self.document_of(cert.issuer)
        except UnknownNode:
            raise UnauthorizedIssuer(f"issuer {cert.issuer} has no DDID")
        if not issuer.has_scope(REVOKE, cert.issued_at):
            raise UnauthorizedIssuer(f"issuer {cert.issuer} lacks the {REVOKE} scope")
        if not self.keys.verify(cert.digest, cert.signature, issuer.auth_key):
            raise UnauthorizedIssuer(f"bad signature on revocation of {cert.target}")
        if doc.revoked:
            raise AlreadyRevoked(f"{cert.target} already revoked")
        self.revoked.add(doc.ddid)
        self.stats["revocation"] += 1
        new = self._commit(self._successor(doc, "revocation", revoked=True))
        __log__.warning(f"DDID | {doc.ddid} (node {doc.subject}) revoked by {cert.issuer} at t={cert.issued_at}")
        self.events.dispatch("on_revoked", ReconfigurationTrigger(doc.subject, doc.ddid, cert.issued_at))
        return new

    # -- authorization

    def authorized(self, node: NodeId, level: int, now: float) -> bool:
        """ScopeMatch and NotExpired and NotRevoked for an authorization rank."""
        doc = self.document_of(node)
        if doc.revoked or doc.ddid in self.revoked:
            return False
        return any(s.rank >= level and doc.scope_valid(s, now) for s in doc.authorization_scopes)

    def auth_check(self, node: NodeId, tx: Transaction, now: float) -> bool:
        self.stats["auth_check"] += 1
        return self.authorized(node, tx.auth_level, now)

    def has_scope(self, node: NodeId, name: str, now: float) -> bool:
        return self.document_of(node).has_scope(name, now)

    # -- reputation

    def score(self, signal: ReputationSignal) -> float:
        a, b, c = self.score_weights
        return a * float(signal.validated_ok) + b * float(signal.uptime_fraction) + c * float(signal.participated)

    def update_reputation(self, node: NodeId, signal: ReputationSignal) -> float:
        doc = self.document_of(node)
        if doc.revoked:
            raise RevokedTarget(f"{doc.ddid} is revoked")
        value = self.alpha * doc.reputation + (1 - self.alpha) * self.score(signal)
        value = min(1.0, max(0.0, value))
        self.stats["reputation"] += 1
        self._commit(self._successor(doc, "reputation", reputation=value))
        return value

    def reputations(self) -> Dict[NodeId, float]:
        return {node: self._docs[d].reputation for node, d in self._by_subject.items()}

    # -- audit

    def audit(self, ddid: str) -> List[DdidDocument]:
        """Walk ``prev_version_hash`` from the anchored head back to version 1."""
        self.resolve(ddid)
        key = self.anchors[ddid]
        chain = []
        while True:
            try:
                raw = self.store.get(key)
            except KeyError:
                raise CorruptArtifact(f"{ddid}: version {key.hex()[:12]} missing from store")
            if digest(raw) != key:
                raise CorruptArtifact(f"{ddid}: stored bytes do not match {key.hex()[:12]}")
            doc = decode(raw)
            if chain and chain[-1].version != doc.version + 1:
                raise CorruptArtifact(f"{ddid}: version gap below {chain[-1].version}")
            chain.append(doc)
            if doc.version == 1:
                break
            key = doc.prev_version_hash
        if chain[-1].prev_version_hash != ZERO_DIGEST:
            raise CorruptArtifact(f"{ddid}: genesis version links to a predecessor")
        chain.reverse()
        return chain
