# -*- coding: utf-8 -*-
"""Scenario files: JSON documents validated against a versioned schema.

Unknown keys are rejected. Validation failures surface as :class:`ConfigError`
carrying the dotted path of the offending field.
"""
from __future__ import annotations

import json
import logging
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

__log__ = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PARAM_ALIASES = {
    "shards": "topology.shards",
    "control": "topology.control_per_shard",
    "data": "topology.data_per_shard",
    "rate": "workload.rate",
    "transactions": "workload.transactions",
    "delta": "scheduler.delta",
    "rules": "scheduler.rules",
    "tau": "xshard.tau",
    "latency": "network.latency",
    "epochs": "epochs",
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TopologySpec(_Section):
    shards: Optional[int] = Field(default=2, ge=1)
    control_per_shard: int = Field(default=4, ge=1)
    data_per_shard: int = Field(default=4, ge=1)
    total_control: Optional[int] = Field(default=None, ge=1)
    total_data: Optional[int] = Field(default=None, ge=1)
    consortia: int = Field(default=2, ge=1)
    root_nodes: int = Field(default=3, ge=1)
    epsilon_rep: float = Field(default=0.1, gt=0, le=1)
    committee_size: Optional[int] = None

    @model_validator(mode="after")
    def _sizing(self):
        if self.shards is None and (self.total_control is None or self.total_data is None):
            raise ValueError("cost-model sizing (shards: null) needs total_control and total_data")
        return self

    @property
    def control_count(self) -> int:
        return self.total_control if self.shards is None else self.shards * self.control_per_shard

    @property
    def data_count(self) -> int:
        return self.total_data if self.shards is None else self.shards * self.data_per_shard


class NetworkSpec(_Section):
    latency: float = Field(default=100.0, ge=0)
    cross_latency: Optional[float] = Field(default=None, ge=0)
    bandwidth: float = Field(default=12_500.0, gt=0)
    jitter: float = Field(default=0.1, ge=0, lt=1)


class CostSpec(_Section):
    t_m: float = Field(default=1.0, gt=0)
    t_g: float = Field(default=1.0, gt=0)
    t_t: float = Field(default=1.0, gt=0)


class SchedulerSpec(_Section):
    delta: float = Field(default=0.5, ge=0, le=1)
    window: int = Field(default=10_000, ge=1)
    retries: int = Field(default=3, ge=0)
    rules: Literal["abc", "b"] = "abc"
    capacity: float = Field(default=2000.0, gt=0, description="weight per simulated second per shard")
    utilization: float = Field(default=0.9, gt=0, le=1)
    block_size_bytes: int = Field(default=1_000_000, ge=1024)


class XShardSpec(_Section):
    tau: int = Field(default=2, ge=1)
    t_min: float = Field(default=100.0, gt=0)
    eps_to: float = Field(default=0.1, ge=0)
    alpha_to: float = Field(default=0.8, ge=0, le=1)


class DdidSpec(_Section):
    threshold: int = Field(default=2, ge=1)
    alpha: float = Field(default=0.9, ge=0, le=1)
    a_min: int = Field(default=1, ge=0)
    control_rank: int = Field(default=3, ge=0)
    scopes: Dict[str, List[Tuple[str, int]]] = Field(default_factory=dict)


class WorkloadSpec(_Section):
    rate: float = Field(default=500.0, gt=0, description="arrivals per simulated second")
    transactions: int = Field(default=500, ge=0)
    accounts: int = Field(default=1000, ge=2)
    objects: int = Field(default=0, ge=0)
    multi_object_fraction: float = Field(default=0.0, ge=0, le=1)
    objects_per_tx: int = Field(default=2, ge=1)
    weight: Literal["constant", "uniform", "exponential"] = "constant"
    weight_mean: float = Field(default=1.0, gt=0)
    auth_levels: Dict[int, float] = Field(default_factory=lambda: {0: 1.0})
    parent_fraction: float = Field(default=0.0, ge=0, le=1)
    payload_bytes: int = Field(default=0, ge=0)
    sign: bool = True

    @field_validator("auth_levels")
    @classmethod
    def _distribution(cls, v):
        if not v or any(p < 0 for p in v.values()) or sum(v.values()) <= 0:
            raise ValueError("auth_levels must be a non-empty distribution of non-negative weights")
        if any(level < 0 for level in v):
            raise ValueError("auth levels must be non-negative")
        return v

    @model_validator(mode="after")
    def _objects(self):
        if self.multi_object_fraction > 0 and self.objects < self.objects_per_tx:
            raise ValueError("multi-object transactions need at least objects_per_tx objects")
        return self


class FaultSpec(_Section):
    kind: Literal["crash", "recover", "silent", "equivocate", "delay", "partition", "heal", "revoke"]
    target: Optional[int] = None
    at: Optional[float] = Field(default=None, ge=0)
    after_messages: Optional[int] = Field(default=None, ge=0)
    delay: float = Field(default=0.0, ge=0)
    group: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _trigger(self):
        if self.at is None and self.after_messages is None:
            raise ValueError("a fault needs 'at' or 'after_messages'")
        if self.kind not in ("partition", "heal") and self.target is None:
            raise ValueError(f"a {self.kind} fault needs a target")
        return self


class Scenario(_Section):
    schema_version: Literal[1]
    name: str = "scenario"
    seed: int = Field(default=0, ge=0)
    epochs: int = Field(default=3, ge=1)
    epoch_ms: float = Field(default=1000.0, gt=0)
    topology: TopologySpec = Field(default_factory=TopologySpec)
    network: NetworkSpec = Field(default_factory=NetworkSpec)
    cost: CostSpec = Field(default_factory=CostSpec)
    scheduler: SchedulerSpec = Field(default_factory=SchedulerSpec)
    xshard: XShardSpec = Field(default_factory=XShardSpec)
    ddid: DdidSpec = Field(default_factory=DdidSpec)
    workload: WorkloadSpec = Field(default_factory=WorkloadSpec)
    faults: List[FaultSpec] = Field(default_factory=list)
    over_threshold: bool = False


def _path(loc: Tuple[Any, ...]) -> str:
    return ".".join(str(p) for p in loc)


def parse_scenario(data: Mapping[str, Any], *, source: str = "<scenario>") -> Scenario:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{source}: a scenario must be a JSON object")
    try:
        return Scenario.model_validate(dict(data))
    except ValidationError as e:
        err = e.errors()[0]
        path = _path(err["loc"])
        raise ConfigError(f"{err['msg']} ({source})", path)


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"{path}: cannot read scenario ({e.strerror})")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}")
    return parse_scenario(data, source=path)


def with_override(scenario: Scenario, param: str, value: Any) -> Scenario:
    """Copy of ``scenario`` with one (possibly aliased, dotted) field replaced."""
    dotted = PARAM_ALIASES.get(param, param)
    data = scenario.model_dump()
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown scenario parameter {param!r}", dotted)
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown scenario parameter {param!r}", dotted)
    node[parts[-1]] = value
    return parse_scenario(data, source=f"override {dotted}={value}")


def parse_values(raw: str) -> List[Any]:
    """``"2,4,8"`` -> ``[2, 4, 8]``; non-numeric items stay strings."""
    out: List[Any] = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(int(item))
        except ValueError:
            try:
                out.append(float(item))
            except ValueError:
                out.append(item)
    if not out:
        raise ConfigError(f"no values in {raw!r}")
    return out
