# -*- coding: utf-8 -*-
"""Pluggable signatures and k-of-n threshold certificates.

The default :class:`HmacSigner` is a keyed-MAC test scheme: signing is
``HMAC-SHA256(seed, msg)`` and verification looks the seed up by public key in
the scheme's escrow, which is filled when key pairs are generated. Every
:class:`KeyRegistry` owns its own signer, so the escrow lives and dies with the
registry. A real signature scheme only has to implement :class:`SignatureScheme`.
"""
from __future__ import annotations

import hashlib
import hmac
import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, Mapping, Optional, Protocol, Tuple

from .errors import BadMemberSignature, BelowThreshold, DuplicateSigner, UnknownKey
from .model import Digest, canonical, canonical_bytes

__log__ = logging.getLogger(__name__)

Signer = Hashable


@canonical
@dataclass(frozen=True)
class PublicKey:

    owner: Signer
    key: bytes


@canonical
@dataclass(frozen=True)
class Signature:

    signer: Signer
    value: bytes


@dataclass(frozen=True)
class KeyPair:
    seed: bytes = field(repr=False)
    public_key: PublicKey

    @property
    def owner(self) -> Signer:
        return self.public_key.owner


class SignatureScheme(Protocol):

    name: str

    def keypair(self, owner: Signer, seed: bytes) -> KeyPair:
        ...

    def sign(self, keypair: KeyPair, msg: bytes) -> bytes:
        ...

    def verify(self, pk: PublicKey, msg: bytes, value: bytes) -> bool:
        ...


class HmacSigner:
    """Deterministic keyed-MAC signer used by simulations and tests."""

    name = "hmac-sha256"

    def __init__(self):
        self._escrow: Dict[Tuple[Signer, bytes], bytes] = {}

    def keypair(self, owner: Signer, seed: bytes) -> KeyPair:
        pk = PublicKey(owner, hashlib.sha256(b"tinc-pk" + canonical_bytes(owner) + seed).digest())
        self._escrow[(owner, pk.key)] = seed
        return KeyPair(seed=seed, public_key=pk)

    def __len__(self):
        return len(self._escrow)

    @staticmethod
    def sign(keypair: KeyPair, msg: bytes) -> bytes:
        return hmac.new(keypair.seed, msg, hashlib.sha256).digest()

    def verify(self, pk: PublicKey, msg: bytes, value: bytes) -> bool:
        seed = self._escrow.get((pk.owner, pk.key))
        if seed is None:
            return False
        return hmac.compare_digest(hmac.new(seed, msg, hashlib.sha256).digest(), value)


def sign(keypair: KeyPair, msg: bytes, scheme: Optional[SignatureScheme] = None) -> Signature:
    value = scheme.sign(keypair, msg) if scheme is not None else HmacSigner.sign(keypair, msg)
    return Signature(keypair.owner, value)


def verify(pk: PublicKey, msg: bytes, sig: Optional[Signature], scheme: SignatureScheme) -> bool:
    if sig is None or sig.signer != pk.owner:
        return False
    return scheme.verify(pk, msg, sig.value)


def max_faulty(n: int) -> int:
    """f = floor((n - 1) / 3) for a group of n replicas."""
    return max(n - 1, 0) // 3


def quorum_size(n: int) -> int:
    return 2 * max_faulty(n) + 1


class KeyRegistry:
    """Public keys of every node and account in a scenario.

    :meth:`generate` stands in for the root plane's distributed key generation:
    every seed is derived from one scenario seed.
    """

    def __init__(self, scheme: Optional[SignatureScheme] = None):
        self.scheme = scheme if scheme is not None else HmacSigner()
        self._keys: Dict[Signer, PublicKey] = {}

    @classmethod
    def generate(cls, owners: Iterable[Signer], seed: int,
                 scheme: Optional[SignatureScheme] = None) -> Tuple["KeyRegistry", Dict[Signer, KeyPair]]:
        registry = cls(scheme)
        pairs = {}
        for owner in owners:
            pairs[owner] = registry.create(owner, seed)
        return registry, pairs

    def create(self, owner: Signer, seed: int) -> KeyPair:
        material = hashlib.sha256(b"tinc-dkg" + canonical_bytes((seed, owner))).digest()
        kp = self.scheme.keypair(owner, material)
        self.register(kp.public_key)
        return kp

    def register(self, pk: PublicKey) -> None:
        self._keys[pk.owner] = pk

    def public_key(self, owner: Signer) -> PublicKey:
        try:
            return self._keys[owner]
        except KeyError:
            raise UnknownKey(owner)

    def __contains__(self, owner: Signer) -> bool:
        return owner in self._keys

    def __len__(self) -> int:
        return len(self._keys)

    def verify(self, msg: bytes, sig: Optional[Signature], pk: Optional[PublicKey] = None) -> bool:
        """Verify ``sig`` over ``msg`` against ``pk`` or the signer's registered key."""
        if sig is None:
            return False
        if pk is None:
            pk = self._keys.get(sig.signer)
            if pk is None:
                return False
        return verify(pk, msg, sig, self.scheme)


@canonical
@dataclass(frozen=True)
class ThresholdCertificate:
    """k-of-n certificate; the test scheme aggregates by keeping the signature list."""

    digest: Digest
    signers: frozenset
    signatures: Tuple[Signature, ...]
    threshold_k: int

    def __len__(self):
        return len(self.signers)


def aggregate(sigs: Iterable[Signature], k: int, *, digest: Digest, registry: KeyRegistry,
              keys: Optional[Mapping[Signer, PublicKey]] = None) -> ThresholdCertificate:
    """Aggregate signatures over ``digest`` into a certificate.

    ``keys`` overrides the registry for individual signers, which is how
    identity-bound keys (after a DDID key rotation) are checked.
    """
    sigs = list(sigs)
    seen = set()
    for sig in sigs:
        if sig.signer in seen:
            raise DuplicateSigner(f"signer {sig.signer!r} appears twice")
        seen.add(sig.signer)
    for sig in sigs:
        pk = (keys or {}).get(sig.signer)
        if not registry.verify(digest, sig, pk):
            raise BadMemberSignature(sig.signer)
    if len(seen) < k:
        raise BelowThreshold(len(seen), k)
    ordered = tuple(sorted(sigs, key=lambda s: canonical_bytes(s.signer)))
    return ThresholdCertificate(digest=digest, signers=frozenset(seen), signatures=ordered, threshold_k=k)


def verify_certificate(cert: ThresholdCertificate, registry: KeyRegistry, allowed: Optional[Iterable[Signer]] = None,
                       *, min_k: int = 0) -> bool:
    """Re-verify a certificate from the key registry alone."""
    signers = [s.signer for s in cert.signatures]
    if len(set(signers)) != len(signers) or frozenset(signers) != cert.signers:
        return False
    if len(cert.signers) < max(cert.threshold_k, min_k):
        return False
    if allowed is not None and not cert.signers <= frozenset(allowed):
        return False
    return all(registry.verify(cert.digest, sig) for sig in cert.signatures)
