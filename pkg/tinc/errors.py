"""Exception hierarchy for the TINC protocol library.

Every operation-level failure is a subclass of :class:`TincException`, grouped by
the module that raises it.
"""


class TincException(Exception):
    """Base TINC Exception."""


# model

class ModelError(TincException):
    """Base exception for domain type construction and encoding."""


class EmptyLeafSet(ModelError):
    """Exception raised when a Merkle root is requested over zero leaves."""


class InvalidTransaction(ModelError):
    """Exception raised when a transaction violates a construction invariant."""


class DecodeError(ModelError):
    """Exception raised when a byte sequence is not a valid canonical encoding."""


# crypto

class CryptoError(TincException):
    """Base exception for signing and certificate aggregation."""


class UnknownKey(CryptoError):
    """Exception raised when a signer is not present in the key registry."""

    __slots__ = ('signer',)

    def __init__(self, signer):
        self.signer = signer
        super().__init__(f"no registered key for signer {signer!r}")


class DuplicateSigner(CryptoError):
    """Exception raised when a certificate contains two signatures from one signer."""


class BelowThreshold(CryptoError):
    """Exception raised when fewer than k distinct signers back a certificate."""

    __slots__ = ('have', 'need')

    def __init__(self, have: int, need: int):
        self.have = have
        self.need = need
        super().__init__(f"{have} distinct signers, {need} required")


class BadMemberSignature(CryptoError):
    """Exception raised when a signature inside a certificate does not verify."""

    __slots__ = ('signer',)

    def __init__(self, signer):
        self.signer = signer
        super().__init__(f"signature from {signer!r} does not verify")


# ddid

class DdidError(TincException):
    """Base exception for the identifier registry."""


class DuplicateSubject(DdidError):
    """Exception raised when a node already owns an active DDID."""


class UnknownNode(DdidError):
    """Exception raised when a node or DDID cannot be resolved."""


class MalformedDdid(DdidError):
    """Exception raised when a DDID string does not parse."""


class BelowApprovalThreshold(DdidError):
    """Exception raised when an update lacks t distinct controller approvals."""


class RevokedTarget(DdidError):
    """Exception raised when an update targets a revoked document."""


class UnauthorizedProposer(DdidError):
    """Exception raised when the proposer or approver is not a controller of the document."""


class StaleProposal(DdidError):
    """Exception raised when the document advanced past the proposal's base version."""


class InvalidUpdate(DdidError):
    """Exception raised when a proposal carries an unknown or ill-typed field."""


class UnauthorizedIssuer(DdidError):
    """Exception raised when a revocation issuer lacks the revocation scope or signed badly."""


class AlreadyRevoked(DdidError):
    """Exception raised when a revoked document is revoked again."""


# rootplane

class RootPlaneError(TincException):
    """Base exception for shard sizing and node distribution."""


class TooFewNodes(RootPlaneError):
    """Exception raised when a plane has fewer nodes than shards."""


class InfeasibleBalance(RootPlaneError):
    """Exception raised when no plan satisfies the consortium-balance bound."""

    __slots__ = ('deviation', 'epsilon')

    def __init__(self, deviation: float, epsilon: float):
        self.deviation = deviation
        self.epsilon = epsilon
        super().__init__(f"consortium deviation {deviation:.4f} exceeds epsilon {epsilon}")


class InsufficientNodes(RootPlaneError):
    """Exception raised when reconfiguration cannot restore a shard's honest minimum."""


# scheduler

class SchedulerError(TincException):
    """Base exception for workload distribution."""


class ZeroTotalWeight(SchedulerError):
    """Exception raised when a threshold is requested over a zero-weight workload."""


class NoAuthorizedShard(SchedulerError):
    """Exception raised when no shard holds a DDID-qualified quorum for a transaction."""


class AllShardsSaturated(SchedulerError):
    """Exception raised when every candidate shard is at its workload threshold."""


# pbft

class PbftError(TincException):
    """Base exception for intra-shard consensus."""


class NotLeader(PbftError):
    """Exception raised when a non-leader proposes a batch."""


class LeaderUnauthorized(PbftError):
    """Exception raised when the leader's DDID fails the minimum authorization check."""


class BadSignature(PbftError):
    """Exception raised when a consensus message signature does not verify."""


class UnknownSigner(PbftError):
    """Exception raised when a consensus message comes from outside the shard."""


class DigestMismatch(PbftError):
    """Exception raised when two pre-prepares conflict on the same (view, seq)."""

    __slots__ = ('evidence',)

    def __init__(self, evidence):
        self.evidence = evidence
        super().__init__(f"conflicting pre-prepare at view {evidence.view} seq {evidence.seq}")


# xshard

class XShardError(TincException):
    """Base exception for the atomic commit protocol."""


class UnknownObjectOwner(XShardError):
    """Exception raised when an object has no owning shard."""


class ShardTimeout(XShardError):
    """Exception raised when a shard misses its dynamic timeout."""


class LocalValidationFailed(XShardError):
    """Exception raised when a participant shard votes to abort."""


class CommitPhaseTimeout(XShardError):
    """Exception raised when commit certificates do not gather in time."""


# simnet

class SimulationError(TincException):
    """Base exception for the network simulator."""


class Deadlock(SimulationError):
    """Exception raised when the event queue drains before the run condition holds."""

    __slots__ = ('now', 'pending')

    def __init__(self, now: float, pending: dict):
        self.now = now
        self.pending = pending
        waiting = ", ".join(f"{node}: {what}" for node, what in sorted(pending.items(), key=lambda i: str(i[0])))
        super().__init__(f"event queue empty at t={now:.3f} with pending [{waiting or 'none'}]")


# ledger

class LedgerError(TincException):
    """Base exception for data-plane storage."""


class BadCertificate(LedgerError):
    """Exception raised when a block's commit certificate does not cover its digest."""


class ChainMismatch(LedgerError):
    """Exception raised when a block does not extend the chain head."""


class AccessDenied(LedgerError):
    """Exception raised when a query fails the data-access DDID check."""


class UnknownSelector(LedgerError):
    """Exception raised when a query selector names nothing stored."""


class UnknownSnapshot(LedgerError):
    """Exception raised when resolving a snapshot that was never taken."""


class DoubleResolve(LedgerError):
    """Exception raised when a snapshot is reverted or released twice."""


class ImmutableBlock(LedgerError):
    """Exception raised on any attempt to mutate a stored block."""


# metrics

class MetricsError(TincException):
    """Base exception for metric computation."""


class EmptyCounts(MetricsError):
    """Exception raised when uniformity is requested over no counts."""


class ZeroCapacity(MetricsError):
    """Exception raised when wasted capacity is requested with zero capacity."""


# cli / scenario

class ConfigError(TincException):
    """Exception raised for an invalid configuration or scenario file."""

    __slots__ = ('path',)

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SimulationDeadlock(TincException):
    """Exception raised when a scenario run stalls."""


class CorruptArtifact(TincException):
    """Exception raised when an exported artifact fails to parse or verify."""
