# -*- coding: utf-8 -*-
"""Seeded discrete-event network on top of a simpy environment.

Delivery time is ``now + latency + size / bandwidth + jitter``, FIFO per
ordered node pair. Faults (crash, silence, equivocation, extra delay and
partitions) take effect at event boundaries.
"""
from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple, Type

import humanize
import simpy

from .errors import Deadlock, SimulationError
from .model import NodeId, canonical_bytes

__log__ = logging.getLogger(__name__)

Handler = Callable[[NodeId, Any], None]


@dataclass(frozen=True)
class NetConfig:
    """Link parameters; times in simulated ms, bandwidth in bytes per simulated ms."""

    latency: float = 100.0
    cross_latency: Optional[float] = None
    bandwidth: float = 12_500.0
    jitter: float = 0.1
    seed: int = 0
    link_latency: Mapping[Tuple[NodeId, NodeId], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.latency < 0 or (self.cross_latency is not None and self.cross_latency < 0):
            raise SimulationError("latency must be non-negative")
        if not self.bandwidth > 0:
            raise SimulationError("bandwidth must be positive")
        if not 0 <= self.jitter < 1:
            raise SimulationError("jitter must be a fraction in [0, 1)")


class FaultKind(Enum):
    CRASH = "crash"
    RECOVER = "recover"
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    DELAY = "delay"
    PARTITION = "partition"
    HEAL = "heal"


@dataclass(frozen=True)
class Fault:
    """One scripted fault; fires at ``at`` (simulated ms) or after ``after_messages`` deliveries."""

    kind: FaultKind
    target: Optional[NodeId] = None
    at: Optional[float] = None
    after_messages: Optional[int] = None
    delay: float = 0.0
    group: frozenset = frozenset()


@dataclass(frozen=True)
class FaultScript:

    faults: Tuple[Fault, ...] = ()
    over_threshold: bool = False

    def byzantine_per_shard(self, shard_of: Callable[[NodeId], Optional[int]]) -> Dict[int, int]:
        counts: Dict[int, Set[NodeId]] = {}
        for f in self.faults:
            if f.kind in (FaultKind.CRASH, FaultKind.SILENT, FaultKind.EQUIVOCATE) and f.target is not None:
                shard = shard_of(f.target)
                if shard is not None:
                    counts.setdefault(shard, set()).add(f.target)
        return {s: len(n) for s, n in counts.items()}


class SimulationReport(NamedTuple):
    now: float
    events: int
    sent: int
    delivered: int
    dropped: int
    held: int


class Network:
    """Message transport and clock for every node in a run.

    Parameters
    ----------
    config: NetConfig
        Latency, bandwidth, jitter and seed.
    shard_of: Callable
        Maps a node to its shard; links between shards use ``cross_latency``.
    trace: bool
        Record send/deliver/drop/fault records for :func:`dump_trace`.
    """

    def __init__(self, config: Optional[NetConfig] = None, *, shard_of: Optional[Callable[[NodeId], Any]] = None,
                 trace: bool = False, env: Optional[simpy.Environment] = None):
        self.config = config or NetConfig()
        self.env = env or simpy.Environment()
        self.shard_of = shard_of
        self.tracing = trace
        self.trace: List[dict] = []
        self._rand = random.Random(self.config.seed)
        self._handlers: Dict[NodeId, List[Tuple[Tuple[Type, ...], Handler]]] = {}
        self._last: Dict[Tuple[NodeId, NodeId], float] = {}
        self._held: List[Tuple[NodeId, NodeId, Any, int]] = []
        self._waiting: Dict[NodeId, str] = {}
        self._count_faults: List[Fault] = []
        self.crashed: Set[NodeId] = set()
        self.silent: Set[NodeId] = set()
        self.equivocating: Set[NodeId] = set()
        self.extra_delay: Dict[NodeId, float] = {}
        self.partitions: List[frozenset] = []
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.bytes_sent = 0
        self.events = 0
        self.drop_filter: Optional[Callable[[int, NodeId, NodeId, Any], bool]] = None

    # -- clock

    @property
    def now(self) -> float:
        return self.env.now

    def call_later(self, delay: float, callback: Callable[[], None]) -> simpy.Event:
        """Run ``callback`` after ``delay`` simulated ms."""
        ev = self.env.timeout(max(delay, 0.0))
        ev.callbacks.append(lambda _ev: callback())
        return ev

    # -- nodes

    def register(self, node: NodeId, handler: Handler, kinds: Iterable[Type] = (object,)) -> None:
        self._handlers.setdefault(node, []).append((tuple(kinds), handler))

    @property
    def nodes(self) -> List[NodeId]:
        return list(self._handlers)

    def mark_waiting(self, node: NodeId, what: str) -> None:
        self._waiting[node] = what

    def clear_waiting(self, node: NodeId) -> None:
        self._waiting.pop(node, None)

    # -- faults

    def crash(self, node: NodeId) -> None:
        self.crashed.add(node)
        self._record("fault", node, node, "crash")

    def recover(self, node: NodeId) -> None:
        self.crashed.discard(node)
        self.silent.discard(node)
        self._record("fault", node, node, "recover")

    def partition(self, group: Iterable[NodeId]) -> None:
        self.partitions.append(frozenset(group))
        self._record("fault", None, None, "partition")

    def heal(self) -> None:
        self.partitions.clear()
        held, self._held = self._held, []
        __log__.info(f"NET | partition healed at t={self.now:.3f}, releasing {len(held)} held messages")
        self._record("fault", None, None, "heal")
        for src, dst, msg, size in held:
            self._schedule(src, dst, msg, size)

    def apply(self, fault: Fault) -> None:
        if fault.kind is FaultKind.CRASH:
            self.crash(fault.target)
        elif fault.kind is FaultKind.RECOVER:
            self.recover(fault.target)
        elif fault.kind is FaultKind.SILENT:
            self.silent.add(fault.target)
        elif fault.kind is FaultKind.EQUIVOCATE:
            self.equivocating.add(fault.target)
        elif fault.kind is FaultKind.DELAY:
            self.extra_delay[fault.target] = fault.delay
        elif fault.kind is FaultKind.PARTITION:
            self.partition(fault.group)
        elif fault.kind is FaultKind.HEAL:
            self.heal()
        __log__.info(f"NET | fault {fault.kind.value} on {fault.target} at t={self.now:.3f}")

    def inject(self, script: FaultScript, max_faulty: Optional[Mapping[int, int]] = None) -> None:
        if max_faulty is not None and self.shard_of is not None and not script.over_threshold:
            for shard, n in script.byzantine_per_shard(self.shard_of).items():
                if n > max_faulty.get(shard, 0):
                    raise SimulationError(f"fault script puts {n} faulty nodes in shard {shard} "
                                          f"(tolerates {max_faulty.get(shard, 0)}); mark it over_threshold")
        for fault in script.faults:
            if fault.after_messages is not None:
                self._count_faults.append(fault)
            else:
                self.call_later((fault.at or 0.0) - self.now, lambda f=fault: self.apply(f))

    def _separated(self, src: NodeId, dst: NodeId) -> bool:
        return any((src in g) != (dst in g) for g in self.partitions)

    # -- transport

    def link_latency(self, src: NodeId, dst: NodeId) -> float:
        cfg = self.config
        if (src, dst) in cfg.link_latency:
            return cfg.link_latency[(src, dst)]
        if cfg.cross_latency is not None and self.shard_of is not None and self.shard_of(src) != self.shard_of(dst):
            return cfg.cross_latency
        return cfg.latency

    def delay(self, src: NodeId, dst: NodeId, size: int) -> float:
        base = self.link_latency(src, dst)
        spread = self._rand.uniform(-self.config.jitter, self.config.jitter) * base if self.config.jitter else 0.0
        return base + size / self.config.bandwidth + spread + self.extra_delay.get(src, 0.0)

    def send(self, src: NodeId, dst: NodeId, msg: Any, size: Optional[int] = None) -> Optional[simpy.Event]:
        if size is None:
            size = wire_size(msg)
        index = self.sent
        self.sent += 1
        self.bytes_sent += size
        if src in self.crashed or src in self.silent:
            self.dropped += 1
            self._record("drop", src, dst, msg, size)
            return None
        if self.drop_filter is not None and self.drop_filter(index, src, dst, msg):
            self.dropped += 1
            self._record("drop", src, dst, msg, size)
            return None
        if self._separated(src, dst):
            self._held.append((src, dst, msg, size))
            self._record("hold", src, dst, msg, size)
            return None
        self._record("send", src, dst, msg, size)
        return self._schedule(src, dst, msg, size)

    def broadcast(self, src: NodeId, dsts: Iterable[NodeId], msg: Any) -> None:
        size = wire_size(msg)
        for dst in dsts:
            self.send(src, dst, msg, size)

    def _schedule(self, src: NodeId, dst: NodeId, msg: Any, size: int) -> simpy.Event:
        at = self.now + self.delay(src, dst, size)
        at = max(at, self._last.get((src, dst), at))
        self._last[(src, dst)] = at
        ev = self.env.timeout(at - self.now)
        ev.callbacks.append(lambda _ev: self._deliver(src, dst, msg, size))
        return ev

    def _deliver(self, src: NodeId, dst: NodeId, msg: Any, size: int) -> None:
        if dst in self.crashed:
            self.dropped += 1
            self._record("drop", src, dst, msg, size)
            return
        if self._separated(src, dst):
            self._held.append((src, dst, msg, size))
            return
        self.delivered += 1
        self._record("deliver", src, dst, msg, size)
        for kinds, handler in self._handlers.get(dst, ()):
            if isinstance(msg, kinds):
                handler(src, msg)
        if self._count_faults:
            due = [f for f in self._count_faults if self.delivered >= f.after_messages]
            if due:
                self._count_faults = [f for f in self._count_faults if f not in due]
                for fault in due:
                    self.apply(fault)

    def _record(self, ev: str, src, dst, msg, size: int = 0) -> None:
        if not self.tracing:
            return
        self.trace.append({
            "t": round(self.now, 6),
            "ev": ev,
            "src": src,
            "dst": dst,
            "kind": msg if isinstance(msg, str) else type(msg).__name__,
            "size": size,
        })

    # -- running

    def run_until(self, condition: Optional[Callable[[], bool]] = None, until: Optional[float] = None) -> SimulationReport:
        """Advance the event queue until ``condition`` holds or time ``until`` is reached.

        Raises :class:`Deadlock` when the queue drains first with a condition pending.
        """
        while True:
            if condition is not None and condition():
                break
            nxt = self.env.peek()
            if nxt == math.inf:
                if condition is not None:
                    raise Deadlock(self.now, dict(self._waiting))
                if until is not None and until > self.now:
                    self.env.run(until=until)
                break
            if until is not None and nxt > until:
                self.env.run(until=until)
                break
            self.env.step()
            self.events += 1
        return self.report()

    def report(self) -> SimulationReport:
        return SimulationReport(self.now, self.events, self.sent, self.delivered, self.dropped, len(self._held))

    def describe(self) -> str:
        return (f"t={self.now:.1f}ms sent={self.sent} delivered={self.delivered} dropped={self.dropped} "
                f"traffic={humanize.naturalsize(self.bytes_sent)}")


def wire_size(msg: Any) -> int:
    size = getattr(msg, "wire_size", None)
    if size is not None:
        return size
    try:
        return len(canonical_bytes(msg))
    except Exception:
        return 64


def dump_trace(records: Iterable[dict], path: str) -> int:
    """Write records as newline-delimited JSON; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def load_trace(path: str) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
