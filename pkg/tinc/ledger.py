# -*- coding: utf-8 -*-
"""Data-plane shard storage.

Blocks are appended only with a commit certificate from the shard's control
plane. Object state is a map ``ObjectId -> (value, last writer)`` that can be
rebuilt from the blocks with :func:`replay`; in-flight cross-shard
transactions write under per-transaction undo logs (:meth:`ShardLedger.snapshot`).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import humanize

from .crypto import KeyRegistry, Signature, ThresholdCertificate, quorum_size, verify_certificate
from .ddid import DATA_READ
from .errors import AccessDenied, BadCertificate, ChainMismatch, CorruptArtifact, DecodeError, DoubleResolve, \
    ImmutableBlock, UnknownNode, UnknownSelector, UnknownSnapshot
from .model import ZERO_DIGEST, Block, BlockHeader, Digest, NodeId, ObjectId, ShardId, Transaction, TxId, \
    canonical_bytes, decode, digest, merkle_proof, verify_header
from .pbft import COMMIT, vote_digest

__log__ = logging.getLogger(__name__)

EXPORT_FORMAT = "tinc-ledger/1"

_MISSING = object()

ObjectState = Dict[ObjectId, Tuple[bytes, TxId]]


def object_value(tx_id: TxId, obj: ObjectId) -> bytes:
    """The opaque value a transaction writes to one object."""
    return digest(tx_id + obj.encode())


def apply_tx(state: ObjectState, tx: Transaction, owns: Optional[Callable[[ObjectId], bool]] = None) -> List[ObjectId]:
    written = []
    for obj in sorted(tx.writes):
        if owns is None or owns(obj):
            state[obj] = (object_value(tx.id, obj), tx.id)
            written.append(obj)
    return written


def replay(blocks: Iterable[Block], owns: Optional[Callable[[ObjectId], bool]] = None) -> ObjectState:
    state: ObjectState = {}
    for block in blocks:
        for tx in block.txs:
            apply_tx(state, tx, owns)
    return state


def state_digest(state: Mapping[ObjectId, Tuple[bytes, TxId]]) -> Digest:
    return digest(canonical_bytes(dict(state)))


class TxRecord(NamedTuple):
    tx: Transaction
    seq: int
    index: int
    proof: Tuple[Tuple[Digest, bool], ...]
    header: BlockHeader


@dataclass
class _Snapshot:
    tx_id: TxId
    undo: Dict[ObjectId, object]
    resolved: bool = False


class ShardLedger:
    """Append-only block store and object state of one shard.

    Parameters
    ----------
    shard: int
        The shard this ledger belongs to.
    keys: KeyRegistry
        Verifies commit certificates.
    validators: Iterable[int]
        Control-plane members whose signatures count in certificates.
    owns: Callable[[str], bool]
        Whether an object is homed on this shard; ``None`` keeps every write.
    """

    def __init__(self, shard: ShardId, keys: KeyRegistry, validators: Iterable[NodeId], *,
                 owns: Optional[Callable[[ObjectId], bool]] = None, control_nodes: Iterable[NodeId] = (),
                 data_nodes: Iterable[NodeId] = ()):
        self.shard = shard
        self.keys = keys
        self.validators = frozenset(validators)
        self.owns = owns
        self.control_nodes = tuple(control_nodes) or tuple(sorted(self.validators))
        self.data_nodes = tuple(data_nodes)
        self._blocks: List[Block] = []
        self._headers: List[BlockHeader] = []
        self._index: Dict[TxId, Tuple[int, int]] = {}
        self.state: ObjectState = {}
        self._snapshots: Dict[TxId, _Snapshot] = {}
        self._stack: List[TxId] = []
        self.header_bytes = 0
        self.block_bytes = 0
        self.denials = 0

    def __repr__(self):
        return f"<ShardLedger shard={self.shard} height={len(self)}>"

    def __len__(self):
        return len(self._blocks)

    def __iter__(self) -> Iterator[Block]:
        return iter(tuple(self._blocks))

    def __getitem__(self, i: int) -> Block:
        return self._blocks[i]

    def __setitem__(self, i, value):
        raise ImmutableBlock(f"shard {self.shard}: stored block {i} cannot be replaced")

    def __delitem__(self, i):
        raise ImmutableBlock(f"shard {self.shard}: stored block {i} cannot be removed")

    @property
    def blocks(self) -> Tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def headers(self) -> Tuple[BlockHeader, ...]:
        return tuple(self._headers)

    @property
    def head(self) -> Optional[BlockHeader]:
        return self._headers[-1] if self._headers else None

    def set_validators(self, validators: Iterable[NodeId]) -> None:
        self.validators = frozenset(validators)
        self.control_nodes = tuple(sorted(self.validators))

    # -- append

    def check_certificate(self, block: Block, cert: ThresholdCertificate) -> None:
        expected = vote_digest(COMMIT, block.shard, block.epoch, block.seq, block.merkle_root)
        if cert.digest != expected:
            raise BadCertificate(f"shard {self.shard} seq {block.seq}: certificate covers a different digest")
        if not verify_certificate(cert, self.keys, self.validators, min_k=quorum_size(len(self.validators))):
            raise BadCertificate(f"shard {self.shard} seq {block.seq}: certificate does not verify")

    def append_block(self, block: Block, cert: ThresholdCertificate) -> BlockHeader:
        if block.shard != self.shard:
            raise ChainMismatch(f"block for shard {block.shard} offered to shard {self.shard}")
        if self.head is not None and block.seq <= self.head.seq:
            raise ChainMismatch(f"shard {self.shard}: seq {block.seq} does not extend head {self.head.seq}")
        self.check_certificate(block, cert)
        header = block.header(self.head.header_hash if self.head else ZERO_DIGEST)
        pos = len(self._blocks)
        self._blocks.append(block)
        self._headers.append(header)
        for i, tx in enumerate(block.txs):
            self._index[tx.id] = (pos, i)
            self._write_tx(tx)
        self.header_bytes += header.size
        self.block_bytes += block.size
        __log__.debug(f"LEDGER | shard {self.shard}: appended seq {block.seq} ({len(block.txs)} txs)")
        return header

    def _write_tx(self, tx: Transaction) -> None:
        for obj in sorted(tx.writes):
            if self.owns is None or self.owns(obj):
                self.write(obj, object_value(tx.id, obj), tx.id)

    def contains(self, tx_id: TxId) -> bool:
        return tx_id in self._index

    # -- speculative state

    def snapshot(self, tx_id: TxId) -> None:
        prior = self._snapshots.get(tx_id)
        if prior is not None and not prior.resolved:
            raise DoubleResolve(f"snapshot for {tx_id.hex()[:12]} already open")
        self._snapshots[tx_id] = _Snapshot(tx_id, {})
        self._stack.append(tx_id)

    def write(self, obj: ObjectId, value: bytes, tx_id: TxId) -> None:
        snap = self._snapshots.get(tx_id)
        if snap is not None and not snap.resolved and obj not in snap.undo:
            snap.undo[obj] = self.state.get(obj, _MISSING)
        self.state[obj] = (value, tx_id)

    def speculate(self, tx: Transaction) -> List[ObjectId]:
        """Snapshot, then write ``tx``'s owned objects."""
        self.snapshot(tx.id)
        written = []
        for obj in sorted(tx.writes):
            if self.owns is None or self.owns(obj):
                self.write(obj, object_value(tx.id, obj), tx.id)
                written.append(obj)
        return written

    def _resolve(self, tx_id: TxId) -> _Snapshot:
        snap = self._snapshots.get(tx_id)
        if snap is None:
            raise UnknownSnapshot(f"no snapshot for {tx_id.hex()[:12]}")
        if snap.resolved:
            raise DoubleResolve(f"snapshot for {tx_id.hex()[:12]} already resolved")
        snap.resolved = True
        self._stack.remove(tx_id)
        return snap

    def revert(self, tx_id: TxId) -> None:
        snap = self._resolve(tx_id)
        for obj, prior in snap.undo.items():
            if prior is _MISSING:
                self.state.pop(obj, None)
            else:
                self.state[obj] = prior

    def release(self, tx_id: TxId) -> None:
        self._resolve(tx_id)

    def is_resolved(self, tx_id: TxId) -> bool:
        snap = self._snapshots.get(tx_id)
        return snap is not None and snap.resolved

    @property
    def open_snapshots(self) -> Tuple[TxId, ...]:
        return tuple(self._stack)

    def state_digest(self) -> Digest:
        return state_digest(self.state)

    # -- integrity

    def verify_chain(self) -> bool:
        prev = ZERO_DIGEST
        for block, header in zip(self._blocks, self._headers):
            if not verify_header(block, header) or header.prev_header_hash != prev:
                return False
            prev = header.header_hash
        return True

    def replay(self) -> ObjectState:
        return replay(self._blocks, self.owns)

    # -- queries

    def query(self, requester: NodeId, selector: Tuple[str, object], registry, *, now: float = 0.0,
              signature: Optional[Signature] = None):
        """DDID-gated read.

        ``selector`` is ``("tx", tx_id)``, ``("object", object_id)`` or
        ``("block", seq)``. The requester signs ``canonical_bytes(selector)``.
        """
        try:
            key = registry.key_of(requester)
        except (UnknownNode, KeyError):
            key = None
        if key is None or not self.keys.verify(canonical_bytes(tuple(selector)), signature, key):
            self._deny(requester, "bad signature")
        try:
            allowed = registry.has_scope(requester, DATA_READ, now)
        except UnknownNode:
            allowed = False
        if not allowed:
            self._deny(requester, f"no live {DATA_READ} scope")
        kind, arg = selector
        if kind == "tx":
            if arg not in self._index:
                raise UnknownSelector(f"no transaction {bytes(arg).hex()[:12]} on shard {self.shard}")
            pos, i = self._index[arg]
            block = self._blocks[pos]
            return TxRecord(block.txs[i], block.seq, i, merkle_proof([t.leaf for t in block.txs], i), self._headers[pos])
        if kind == "object":
            if arg not in self.state:
                raise UnknownSelector(f"no object {arg!r} on shard {self.shard}")
            return self.state[arg]
        if kind == "block":
            for block in self._blocks:
                if block.seq == arg:
                    return block
            raise UnknownSelector(f"no block {arg} on shard {self.shard}")
        raise UnknownSelector(f"unknown selector kind {kind!r}")

    def _deny(self, requester: NodeId, why: str):
        self.denials += 1
        __log__.warning(f"LEDGER | shard {self.shard}: query by node {requester} denied ({why})")
        raise AccessDenied(f"node {requester}: {why}")

    # -- storage accounting

    def storage(self) -> Dict[NodeId, int]:
        """Bytes held per node: headers on control replicas, full blocks on data nodes."""
        out = {n: self.header_bytes for n in self.control_nodes}
        out.update({n: self.block_bytes for n in self.data_nodes})
        return out

    def describe(self) -> str:
        return (f"shard {self.shard}: {len(self)} blocks, {humanize.naturalsize(self.block_bytes)} of blocks, "
                f"{humanize.naturalsize(self.header_bytes)} of headers")

    # -- export

    def export(self) -> List[dict]:
        records = [{"format": EXPORT_FORMAT, "shard": self.shard, "height": len(self)}]
        for block, header in zip(self._blocks, self._headers):
            records.append({
                "seq": block.seq,
                "block": canonical_bytes(block).hex(),
                "header": canonical_bytes(header).hex(),
            })
        return records

    def dump(self, path: str) -> int:
        records = self.export()
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        return len(records) - 1


def load_export(path: str) -> List[dict]:
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except (OSError, ValueError) as e:
        raise CorruptArtifact(f"{path}: unreadable export ({e})")


def verify_export(records: Sequence[dict]) -> int:
    """Re-validate an exported chain; returns the number of blocks checked.

    Raises :class:`CorruptArtifact` naming the first bad block.
    """
    if not records or records[0].get("format") != EXPORT_FORMAT:
        raise CorruptArtifact("missing or unknown export header")
    shard = records[0].get("shard")
    prev = ZERO_DIGEST
    last_seq = -1
    for record in records[1:]:
        name = f"block {record.get('seq')}"
        try:
            block = decode(bytes.fromhex(record["block"]))
            header = decode(bytes.fromhex(record["header"]))
        except (KeyError, ValueError, DecodeError) as e:
            raise CorruptArtifact(f"{name}: undecodable ({e})")
        if not isinstance(block, Block) or not isinstance(header, BlockHeader):
            raise CorruptArtifact(f"{name}: wrong record types")
        if block.shard != shard or block.seq != record.get("seq") or block.seq <= last_seq:
            raise CorruptArtifact(f"{name}: out of place in shard {shard}")
        if not verify_header(block, header):
            raise CorruptArtifact(f"{name}: header does not match block contents")
        if header.prev_header_hash != prev:
            raise CorruptArtifact(f"{name}: broken header link")
        prev = header.header_hash
        last_seq = block.seq
    return len(records) - 1
