# -*- coding: utf-8 -*-
"""Core domain types and their canonical byte encoding.

The encoding is documented byte-for-byte in ``docs/encoding.md``. Every type that
takes part in hashing or signing is registered with :func:`canonical` so that
:func:`decode` can rebuild it.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Tuple, Type

from .errors import DecodeError, EmptyLeafSet, InvalidTransaction, ModelError

if TYPE_CHECKING:
    from .crypto import Signature

DIGEST_NAME = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

NodeId = int
ShardId = int
ConsortiumId = str
AccountId = str
ObjectId = str
TxId = bytes
Digest = bytes

# Field metadata: excluded from signing bytes (signatures, derived ids).
UNSIGNED = {"signing": False}

_TYPES: Dict[str, Type] = {}


def canonical(cls):
    """Register a dataclass or Enum for canonical decoding."""
    _TYPES[cls.__name__] = cls
    return cls


def digest(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# encoding

def _u32(n: int) -> bytes:
    return struct.pack(">I", n)


def _encode(value: Any, out: List[bytes], signing: bool) -> None:
    if value is None:
        out.append(b"N")
    elif isinstance(value, bool):
        out.append(b"T" if value else b"F")
    elif isinstance(value, Enum):
        out.append(b"U")
        _encode(type(value).__name__, out, signing)
        _encode(value.value, out, signing)
    elif isinstance(value, int):
        try:
            out.append(b"I" + struct.pack(">q", value))
        except struct.error:
            raise ModelError(f"integer {value} does not fit 64 bits")
    elif isinstance(value, float):
        if math.isnan(value):
            raise ModelError("NaN has no canonical encoding")
        out.append(b"R" + struct.pack(">d", value))
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(b"S" + _u32(len(raw)) + raw)
    elif isinstance(value, (bytes, bytearray)):
        out.append(b"B" + _u32(len(value)) + bytes(value))
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        fields = [f for f in dataclasses.fields(value) if not signing or f.metadata.get("signing", True)]
        out.append(b"D")
        _encode(type(value).__name__, out, signing)
        out.append(_u32(len(fields)))
        for f in fields:
            _encode(getattr(value, f.name), out, signing)
    elif isinstance(value, (frozenset, set)):
        items = sorted(canonical_bytes(v, signing=signing) for v in value)
        out.append(b"E" + _u32(len(items)))
        out.extend(items)
    elif isinstance(value, dict):
        pairs = sorted((canonical_bytes(k, signing=signing), v) for k, v in value.items())
        out.append(b"M" + _u32(len(pairs)))
        for k, v in pairs:
            out.append(k)
            _encode(v, out, signing)
    elif isinstance(value, (tuple, list)):
        out.append(b"L" + _u32(len(value)))
        for v in value:
            _encode(v, out, signing)
    else:
        raise ModelError(f"no canonical encoding for {type(value).__name__}")


def canonical_bytes(value: Any, *, signing: bool = False) -> bytes:
    """Deterministic, field-order-fixed, length-prefixed encoding of ``value``."""
    out: List[bytes] = []
    _encode(value, out, signing)
    return b"".join(out)


def signing_bytes(value: Any) -> bytes:
    """Canonical bytes with signature and derived-id fields left out."""
    return canonical_bytes(value, signing=True)


class _Reader:

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated input at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


def _decode(r: _Reader) -> Any:
    tag = r.take(1)
    if tag == b"N":
        return None
    if tag == b"T":
        return True
    if tag == b"F":
        return False
    if tag == b"I":
        return struct.unpack(">q", r.take(8))[0]
    if tag == b"R":
        return struct.unpack(">d", r.take(8))[0]
    if tag == b"S":
        try:
            return r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError(str(e))
    if tag == b"B":
        return r.take(r.u32())
    if tag == b"L":
        return tuple(_decode(r) for _ in range(r.u32()))
    if tag == b"E":
        return frozenset(_decode(r) for _ in range(r.u32()))
    if tag == b"M":
        count = r.u32()
        return {_decode(r): _decode(r) for _ in range(count)}
    if tag == b"U":
        name = _decode(r)
        value = _decode(r)
        try:
            return _TYPES[name](value)
        except (KeyError, ValueError):
            raise DecodeError(f"unknown enum member {name}({value!r})")
    if tag == b"D":
        name = _decode(r)
        try:
            cls = _TYPES[name]
        except KeyError:
            raise DecodeError(f"unregistered type {name!r}")
        count = r.u32()
        fields = dataclasses.fields(cls)
        if count != len(fields):
            raise DecodeError(f"{name}: expected {len(fields)} fields, got {count}")
        values = {f.name: _decode(r) for f in fields}
        try:
            return cls(**values)
        except (TypeError, ModelError) as e:
            raise DecodeError(f"{name}: {e}")
    raise DecodeError(f"unknown tag {tag!r} at offset {r.pos - 1}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`canonical_bytes` for registered types."""
    r = _Reader(data)
    value = _decode(r)
    if r.pos != len(data):
        raise DecodeError(f"{len(data) - r.pos} trailing bytes")
    return value


# ---------------------------------------------------------------------------
# Merkle trees

def _parent(left: Digest, right: Digest) -> Digest:
    return digest(left + right)


def merkle_root(leaves: Sequence[Digest]) -> Digest:
    """Binary Merkle root; odd levels duplicate their last node, one leaf is its own root."""
    if not leaves:
        raise EmptyLeafSet("merkle root over an empty leaf list")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def merkle_proof(leaves: Sequence[Digest], index: int) -> Tuple[Tuple[Digest, bool], ...]:
    """Sibling path for ``leaves[index]``; the flag is True when the sibling sits on the left."""
    if not leaves:
        raise EmptyLeafSet("merkle proof over an empty leaf list")
    if not 0 <= index < len(leaves):
        raise IndexError(index)
    proof = []
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        sibling = index ^ 1
        proof.append((level[sibling], sibling < index))
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return tuple(proof)


def verify_merkle_proof(leaf: Digest, proof: Iterable[Tuple[Digest, bool]], root: Digest) -> bool:
    node = leaf
    for sibling, is_left in proof:
        node = _parent(sibling, node) if is_left else _parent(node, sibling)
    return node == root


# ---------------------------------------------------------------------------
# domain types

@canonical
@dataclass(frozen=True)
class Transaction:
    """A scheduled unit of work.

    ``id`` is the digest of the signing bytes (every field but ``id`` and
    ``sender_sig``); build instances with :meth:`create` so it is filled in.
    """

    source: AccountId
    destination: AccountId
    explicit_parents: frozenset = frozenset()
    read_set: frozenset = frozenset()
    write_set: frozenset = frozenset()
    weight: float = 1.0
    auth_level: int = 0
    timestamp: float = 0.0
    payload: bytes = b""
    id: TxId = field(default=b"", metadata=UNSIGNED)
    sender_sig: Optional["Signature"] = field(default=None, metadata=UNSIGNED)

    def __post_init__(self):
        if self.weight < 0:
            raise InvalidTransaction(f"negative weight {self.weight}")
        if self.auth_level < 0:
            raise InvalidTransaction(f"negative auth level {self.auth_level}")

    @classmethod
    def create(cls, source: AccountId, destination: AccountId, **kwargs) -> "Transaction":
        for key in ("explicit_parents", "read_set", "write_set"):
            if key in kwargs:
                kwargs[key] = frozenset(kwargs[key])
        kwargs.pop("id", None)
        kwargs.pop("sender_sig", None)
        tx = cls(source=source, destination=destination, **kwargs)
        return dataclasses.replace(tx, id=digest(signing_bytes(tx)))

    @property
    def id_valid(self) -> bool:
        return self.id == digest(signing_bytes(self))

    @property
    def accounts(self) -> frozenset:
        return frozenset((self.source, self.destination))

    @property
    def writes(self) -> frozenset:
        """Objects written on execution; account balances are state objects too."""
        return self.write_set | self.accounts

    @property
    def touched(self) -> frozenset:
        return self.read_set | self.writes

    @cached_property
    def leaf(self) -> Digest:
        return digest(canonical_bytes(self))

    @cached_property
    def size(self) -> int:
        return len(canonical_bytes(self))

    @property
    def short_id(self) -> str:
        return self.id.hex()[:12]


def batch_digest(txs: Sequence[Transaction]) -> Digest:
    """Digest of an ordered batch: Merkle root over full-transaction leaves."""
    if not txs:
        return ZERO_DIGEST
    return merkle_root([tx.leaf for tx in txs])


@canonical
@dataclass(frozen=True)
class Block:

    shard: ShardId
    epoch: int
    seq: int
    txs: Tuple[Transaction, ...] = ()

    @cached_property
    def merkle_root(self) -> Digest:
        return batch_digest(self.txs)

    @cached_property
    def block_hash(self) -> Digest:
        return digest(canonical_bytes(self))

    @property
    def size(self) -> int:
        return len(canonical_bytes(self))

    def header(self, prev_header_hash: Digest = ZERO_DIGEST) -> "BlockHeader":
        return BlockHeader(
            block_hash=self.block_hash,
            merkle_root=self.merkle_root,
            prev_header_hash=prev_header_hash,
            shard=self.shard,
            epoch=self.epoch,
            seq=self.seq,
        )


@canonical
@dataclass(frozen=True)
class BlockHeader:

    block_hash: Digest
    merkle_root: Digest
    prev_header_hash: Digest
    shard: ShardId
    epoch: int
    seq: int

    @property
    def header_hash(self) -> Digest:
        return digest(canonical_bytes(self))

    @property
    def size(self) -> int:
        return len(canonical_bytes(self))


def verify_header(block: Block, header: BlockHeader) -> bool:
    return (
        block.block_hash == header.block_hash
        and block.merkle_root == header.merkle_root
        and (block.shard, block.epoch, block.seq) == (header.shard, header.epoch, header.seq)
    )


@canonical
@dataclass(frozen=True)
class CostModel:
    """Computation, communication and workload-distribution cost constants."""

    t_m: float = 1.0
    t_g: float = 1.0
    t_t: float = 1.0

    def __post_init__(self):
        for name in ("t_m", "t_g", "t_t"):
            if not getattr(self, name) > 0:
                raise ModelError(f"cost constant {name} must be strictly positive")
