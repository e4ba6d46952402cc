# -*- coding: utf-8 -*-
"""Seeded synthetic workloads."""
from __future__ import annotations

import dataclasses
import logging
from typing import Dict, List, Mapping, Optional

import numpy as np

from .crypto import KeyPair, KeyRegistry, sign
from .model import AccountId, Transaction

__log__ = logging.getLogger(__name__)


def account_name(i: int) -> AccountId:
    return f"acct-{i:06d}"


def object_name(i: int) -> str:
    return f"obj-{i:06d}"


def account_keys(spec, keys: KeyRegistry, seed: int) -> Dict[AccountId, KeyPair]:
    """Key pairs of every account of ``spec``, registered in ``keys``."""
    return {account_name(i): keys.create(account_name(i), seed) for i in range(spec.accounts)}


def _weights(spec, rng: np.random.Generator, n: int) -> np.ndarray:
    if spec.weight == "uniform":
        return rng.uniform(0, 2 * spec.weight_mean, size=n)
    if spec.weight == "exponential":
        return rng.exponential(spec.weight_mean, size=n)
    return np.full(n, spec.weight_mean)


def generate(spec, *, epochs: int, epoch_ms: float, seed: int,
             keys: Optional[Mapping[AccountId, KeyPair]] = None) -> List[Transaction]:
    """Transactions with Poisson arrivals at ``spec.rate`` per simulated second.

    Generation stops at ``spec.transactions`` or at the end of the last epoch,
    whichever comes first. Two-party transfers draw distinct accounts
    uniformly; a ``multi_object_fraction`` of them also write shared objects.
    """
    rng = np.random.default_rng(seed)
    horizon = epochs * epoch_ms
    n = spec.transactions
    gaps = rng.exponential(1000.0 / spec.rate, size=n)
    times = np.cumsum(gaps)
    n = int(np.searchsorted(times, horizon, side="left"))
    weights = _weights(spec, rng, n)
    levels = sorted(spec.auth_levels)
    probs = np.array([spec.auth_levels[l] for l in levels], dtype=float)
    probs /= probs.sum()
    auth = rng.choice(levels, size=n, p=probs) if n else np.array([], dtype=int)
    src = rng.integers(0, spec.accounts, size=n)
    shift = rng.integers(1, spec.accounts, size=n)
    multi = rng.random(n) < spec.multi_object_fraction
    parented = rng.random(n) < spec.parent_fraction
    payload = bytes(spec.payload_bytes)
    txs: List[Transaction] = []
    for i in range(n):
        s = int(src[i])
        d = (s + int(shift[i])) % spec.accounts
        kwargs = {}
        if multi[i] and spec.objects:
            objs = rng.choice(spec.objects, size=spec.objects_per_tx, replace=False)
            names = [object_name(int(o)) for o in objs]
            kwargs["write_set"] = names[:1]
            kwargs["read_set"] = names[1:]
        if parented[i] and txs:
            kwargs["explicit_parents"] = [txs[int(rng.integers(max(0, len(txs) - 100), len(txs)))].id]
        tx = Transaction.create(
            account_name(s),
            account_name(d),
            weight=float(weights[i]),
            auth_level=int(auth[i]),
            timestamp=round(float(times[i]), 6),
            payload=payload,
            **kwargs,
        )
        if keys is not None and spec.sign:
            tx = dataclasses.replace(tx, sender_sig=sign(keys[tx.source], tx.id))
        txs.append(tx)
    __log__.info(f"generated {len(txs)} transactions over {epochs} epochs (rate {spec.rate}/s)")
    return txs
