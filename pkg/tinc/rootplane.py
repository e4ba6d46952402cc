# -*- coding: utf-8 -*-
"""Root-plane logic: shard sizing, consortium-balanced node distribution,
fault accounting and epoch-boundary reconfiguration."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

from .errors import InfeasibleBalance, InsufficientNodes, RootPlaneError, TooFewNodes
from .model import ConsortiumId, CostModel, NodeId, ShardId

__log__ = logging.getLogger(__name__)


def performance_cost(cm: CostModel, N: int, W: float, C: int) -> float:
    """F(C) = t_m N / C + t_g C^2 + t_t W / C."""
    return cm.t_m * N / C + cm.t_g * C * C + cm.t_t * W / C


def optimal_shard_count(cm: CostModel, N: int, W: float) -> int:
    if N < 1:
        raise TooFewNodes("a network needs at least one node")
    x = ((cm.t_m * N + cm.t_t * W) / (2 * cm.t_g)) ** (1 / 3)
    return min(max(int(math.floor(x + 0.5)), 1), N)


def min_honest(n: int) -> int:
    """Non-faulty nodes a shard of ``n`` control nodes needs."""
    return max(n - 1, 0) // 3 + 1


def global_fault_bound(min_honest_nodes: int, C: int) -> int:
    """Largest f with f < floor(m * (C + 1) / 2)."""
    return max(min_honest_nodes * (C + 1) // 2 - 1, 0)


def default_committee_size(C: int, N_c: int) -> int:
    M = C if C % 2 else C + 1
    if M > N_c:
        M = N_c if N_c % 2 else N_c - 1
    return max(M, 1)


@dataclass(frozen=True)
class TopologyConfig:

    control_nodes: Tuple[NodeId, ...]
    data_nodes: Tuple[NodeId, ...]
    consortium_of: Mapping[NodeId, ConsortiumId]
    epsilon_rep: float = 0.1
    committee_size: Optional[int] = None
    cost_model: CostModel = field(default_factory=CostModel)
    workload: float = 0.0

    def __post_init__(self):
        overlap = set(self.control_nodes) & set(self.data_nodes)
        if overlap:
            raise RootPlaneError(f"nodes {sorted(overlap)} are in both planes")
        missing = [n for n in self.nodes if n not in self.consortium_of]
        if missing:
            raise RootPlaneError(f"nodes {missing} have no consortium")
        if not 0 < self.epsilon_rep <= 1:
            raise RootPlaneError(f"epsilon_rep {self.epsilon_rep} outside (0, 1]")
        if self.committee_size is not None:
            if self.committee_size % 2 == 0 or self.committee_size > self.N_c:
                raise RootPlaneError(f"committee size {self.committee_size} must be odd and at most {self.N_c}")
        if self.workload < 0:
            raise RootPlaneError("workload estimate must be non-negative")

    @property
    def nodes(self) -> Tuple[NodeId, ...]:
        return tuple(self.control_nodes) + tuple(self.data_nodes)

    @property
    def N(self) -> int:
        return self.N_c + self.N_d

    @property
    def N_c(self) -> int:
        return len(self.control_nodes)

    @property
    def N_d(self) -> int:
        return len(self.data_nodes)


class FaultBounds(NamedTuple):
    per_shard_min_honest: List[int]
    global_f_bound: int


@dataclass(frozen=True)
class ShardPlan:

    shard_count: int
    control: Tuple[Tuple[NodeId, ...], ...]
    data: Tuple[Tuple[NodeId, ...], ...]
    leaders: Tuple[NodeId, ...]
    committee: Tuple[NodeId, ...]
    consortium_of: Mapping[NodeId, ConsortiumId]
    epsilon_rep: float
    cost_model: CostModel = field(default_factory=CostModel)
    workload: float = 0.0
    delta_n: Tuple[int, ...] = ()
    sized_by_cost_model: bool = False

    @property
    def shards(self) -> range:
        return range(self.shard_count)

    @property
    def min_honest(self) -> Tuple[int, ...]:
        return tuple(min_honest(len(c)) for c in self.control)

    @property
    def f_max(self) -> Tuple[int, ...]:
        return tuple(max(len(c) - 1, 0) // 3 for c in self.control)

    @property
    def global_f_bound(self) -> int:
        return fault_bounds(self).global_f_bound

    @property
    def control_nodes(self) -> Tuple[NodeId, ...]:
        return tuple(n for shard in self.control for n in shard)

    @property
    def data_nodes(self) -> Tuple[NodeId, ...]:
        return tuple(n for shard in self.data for n in shard)

    def shard_of(self, node: NodeId) -> Optional[ShardId]:
        for i in self.shards:
            if node in self.control[i] or node in self.data[i]:
                return i
        return None

    def leader(self, shard: ShardId) -> NodeId:
        return self.leaders[shard]

    def to_dict(self) -> dict:
        return {
            "shard_count": self.shard_count,
            "shards": [
                {
                    "shard": i,
                    "control": list(self.control[i]),
                    "data": list(self.data[i]),
                    "leader": self.leaders[i],
                    "min_honest": self.min_honest[i],
                    "f_max": self.f_max[i],
                    "delta_n": self.delta_n[i] if self.delta_n else 0,
                }
                for i in self.shards
            ],
            "committee": list(self.committee),
            "global_f_bound": self.global_f_bound,
            "epsilon_rep": self.epsilon_rep,
            "consortium_deviation": consortium_deviation(self),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _rank(nodes: Iterable[NodeId], reputations: Mapping[NodeId, float]) -> List[NodeId]:
    return sorted(nodes, key=lambda n: (-reputations.get(n, 0.0), n))


def _deal(nodes: Sequence[NodeId], C: int, consortium_of: Mapping[NodeId, ConsortiumId],
          reputations: Mapping[NodeId, float]) -> List[List[NodeId]]:
    """Round-robin over shards, consortium by consortium (largest first)."""
    groups: Dict[ConsortiumId, List[NodeId]] = {}
    for n in nodes:
        groups.setdefault(consortium_of[n], []).append(n)
    order = sorted(groups, key=lambda c: (-len(groups[c]), c))
    shards: List[List[NodeId]] = [[] for _ in range(C)]
    cursor = 0
    for consortium in order:
        for n in _rank(groups[consortium], reputations):
            shards[cursor % C].append(n)
            cursor += 1
    return shards


def _plane_deviation(shards: Sequence[Sequence[NodeId]], consortium_of: Mapping[NodeId, ConsortiumId]) -> float:
    members = [n for s in shards for n in s]
    if not members:
        return 0.0
    totals = Counter(consortium_of[n] for n in members)
    worst = 0.0
    for shard in shards:
        if not shard:
            continue
        local = Counter(consortium_of[n] for n in shard)
        for consortium, total in totals.items():
            worst = max(worst, abs(local.get(consortium, 0) / len(shard) - total / len(members)))
    return worst


def consortium_deviation(plan: ShardPlan) -> float:
    """Largest |N_ij / N_i - N_j / N| over shards, consortia and both planes."""
    return max(_plane_deviation(plan.control, plan.consortium_of), _plane_deviation(plan.data, plan.consortium_of))


def _leaders(control: Sequence[Sequence[NodeId]], committee: Sequence[NodeId],
             reputations: Mapping[NodeId, float]) -> Tuple[NodeId, ...]:
    chosen = set(committee)
    leaders = []
    for shard in control:
        pool = [n for n in shard if n in chosen] or list(shard)
        leaders.append(_rank(pool, reputations)[0])
    return tuple(leaders)


def distribute_nodes(cfg: TopologyConfig, reputations: Mapping[NodeId, float], C: int) -> ShardPlan:
    if C < 1:
        raise TooFewNodes("shard count must be at least 1")
    if C > cfg.N_c or C > cfg.N_d:
        raise TooFewNodes(f"{C} shards need at least {C} control and {C} data nodes "
                          f"(have {cfg.N_c} and {cfg.N_d})")
    M = cfg.committee_size or default_committee_size(C, cfg.N_c)
    committee = tuple(_rank(cfg.control_nodes, reputations)[:M])
    control = _deal(cfg.control_nodes, C, cfg.consortium_of, reputations)
    data = _deal(cfg.data_nodes, C, cfg.consortium_of, reputations)
    plan = ShardPlan(
        shard_count=C,
        control=tuple(tuple(s) for s in control),
        data=tuple(tuple(s) for s in data),
        leaders=_leaders(control, committee, reputations),
        committee=committee,
        consortium_of=dict(cfg.consortium_of),
        epsilon_rep=cfg.epsilon_rep,
        cost_model=cfg.cost_model,
        workload=cfg.workload,
        delta_n=(0,) * C,
    )
    deviation = consortium_deviation(plan)
    if deviation > cfg.epsilon_rep + 1e-12:
        raise InfeasibleBalance(deviation, cfg.epsilon_rep)
    __log__.info(f"ROOT | {cfg.N_c} control + {cfg.N_d} data nodes into {C} shards, "
                 f"committee {len(committee)}, deviation {deviation:.4f}")
    return plan


def plan_network(cfg: TopologyConfig, reputations: Mapping[NodeId, float]) -> ShardPlan:
    """Size the network with the cost model, then distribute."""
    C = optimal_shard_count(cfg.cost_model, cfg.N, cfg.workload)
    C = max(1, min(C, cfg.N_c, cfg.N_d))
    return replace(distribute_nodes(cfg, reputations, C), sized_by_cost_model=True)


def fault_bounds(plan: ShardPlan) -> FaultBounds:
    per_shard = [min_honest(len(c)) for c in plan.control]
    return FaultBounds(per_shard, global_fault_bound(min(per_shard), plan.shard_count))


def shards_below_minimum(plan: ShardPlan, inactive: Iterable[NodeId]) -> List[ShardId]:
    """Shards whose active control nodes fall under their honest minimum."""
    inactive = set(inactive)
    return [i for i in plan.shards
            if sum(1 for n in plan.control[i] if n not in inactive) < min_honest(len(plan.control[i]))]


def reconfigure(plan: ShardPlan, departed: Iterable[NodeId], joined: Iterable[NodeId],
                reputations: Mapping[NodeId, float], *,
                joined_consortia: Optional[Mapping[NodeId, ConsortiumId]] = None) -> ShardPlan:
    """Epoch-boundary reconfiguration.

    Joiners enter the control plane. They go to the smallest shards first
    (restoring depleted shards); shards still under their honest minimum then
    take donors from shards that can spare a node.
    """
    departed = set(departed)
    joined = [n for n in sorted(set(joined)) if n not in departed]
    if not departed and not joined:
        return plan

    consortium_of = dict(plan.consortium_of)
    consortium_of.update(joined_consortia or {})
    unknown = [n for n in joined if n not in consortium_of]
    if unknown:
        raise RootPlaneError(f"joining nodes {unknown} have no consortium")

    control = [[n for n in shard if n not in departed] for shard in plan.control]
    data = [[n for n in shard if n not in departed] for shard in plan.data]

    if plan.sized_by_cost_model:
        control_nodes = [n for s in control for n in s] + joined
        data_nodes = [n for s in data for n in s]
        cfg = TopologyConfig(tuple(control_nodes), tuple(data_nodes), consortium_of, plan.epsilon_rep,
                             cost_model=plan.cost_model, workload=plan.workload)
        C = max(1, min(optimal_shard_count(plan.cost_model, cfg.N, plan.workload), cfg.N_c, cfg.N_d))
        if C != plan.shard_count:
            __log__.warning(f"ROOT | network size changed to {cfg.N}: redistributing {plan.shard_count} -> {C} shards")
            return replace(distribute_nodes(cfg, reputations, C), sized_by_cost_model=True)

    required = [min_honest(len(s)) for s in plan.control]
    delta = [0] * plan.shard_count

    for node in _rank(joined, reputations):
        target = min(plan.shards, key=lambda i: (len(control[i]) - len(plan.control[i]), len(control[i]), i))
        control[target].append(node)
        delta[target] += 1

    def deviation_with(shards):
        return _plane_deviation(shards, consortium_of)

    for i in plan.shards:
        while len(control[i]) < required[i]:
            donors = [j for j in plan.shards if j != i and len(control[j]) - 1 >= required[j]]
            if not donors:
                raise InsufficientNodes(f"shard {i} has {len(control[i])} active control nodes, "
                                        f"needs {required[i]}, and no shard can spare one")
            best = None
            for j in sorted(donors, key=lambda j: (-len(control[j]), j)):
                for node in _rank(control[j], reputations)[::-1]:
                    if node == plan.leaders[j] and len(control[j]) > 1:
                        continue
                    trial = [list(s) for s in control]
                    trial[j].remove(node)
                    trial[i].append(node)
                    key = (deviation_with(trial), -len(control[j]), j, reputations.get(node, 0.0), node)
                    if best is None or key < best[0]:
                        best = (key, j, node)
            _, j, node = best
            control[j].remove(node)
            control[i].append(node)
            delta[i] += 1

    for i in plan.shards:
        if not data[i]:
            donor = max(plan.shards, key=lambda j: (len(data[j]), -j))
            if len(data[donor]) < 2:
                raise InsufficientNodes(f"data shard {i} is empty and no data shard can spare a node")
            moved = _rank(data[donor], reputations)[-1]
            data[donor].remove(moved)
            data[i].append(moved)

    all_control = [n for s in control for n in s]
    M = default_committee_size(plan.shard_count, len(all_control))
    committee = tuple(_rank(all_control, reputations)[:M])
    new = replace(
        plan,
        control=tuple(tuple(s) for s in control),
        data=tuple(tuple(s) for s in data),
        leaders=_leaders(control, committee, reputations),
        committee=committee,
        consortium_of=consortium_of,
        delta_n=tuple(delta),
    )
    deviation = consortium_deviation(new)
    if deviation > plan.epsilon_rep + 1e-12:
        __log__.warning(f"ROOT | reconfigured plan deviates {deviation:.4f} from proportional representation")
    __log__.info(f"ROOT | reconfigured: -{len(departed)} +{len(joined)} nodes, delta_n {list(delta)}")
    return new
