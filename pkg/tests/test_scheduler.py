import random

import pytest

from tinc.crypto import KeyRegistry
from tinc.ddid import DATA_READ, REVOKE, VALIDATE, DdidRegistry, RevocationCertificate
from tinc.errors import AllShardsSaturated, NoAuthorizedShard, SchedulerError, UnknownNode, ZeroTotalWeight
from tinc.metrics import expected_cross_shard_ratio
from tinc.model import Transaction
from tinc.rootplane import TopologyConfig, distribute_nodes
from tinc.scheduler import (RULE_LIGHTEST, RULE_OVERLAP, DependencyIndex, OwnershipMap, Scheduler, ShardLoad, admit,
                            assign, authorized_shards, carry_over, choose_shard, compute_threshold, coordinator_of,
                            dependency_set, random_assignment_external_deps)


def make_plan(shards=2, per_shard=4):
    n = shards * per_shard
    control = tuple(range(n))
    data = tuple(range(n, 2 * n))
    consortium_of = {i: f"org{i % 2}" for i in control + data}
    cfg = TopologyConfig(control, data, consortium_of)
    return distribute_nodes(cfg, {i: 0.5 for i in control + data}, shards)


def tx(src, dst, ts, **kwargs):
    return Transaction.create(src, dst, timestamp=float(ts), **kwargs)


def random_trace(rng, n, accounts=8, objects=6):
    out = []
    for _ in range(n):
        kwargs = {}
        if rng.random() < 0.3:
            kwargs["write_set"] = [f"obj-{rng.randrange(objects)}"]
        if rng.random() < 0.2:
            kwargs["read_set"] = [f"obj-{rng.randrange(objects)}"]
        if out and rng.random() < 0.2:
            kwargs["explicit_parents"] = [rng.choice(out).id]
        a, b = rng.sample(range(accounts), 2)
        out.append(tx(f"acct-{a}", f"acct-{b}", rng.randrange(30), **kwargs))
    return out


def oracle(t, history):
    objs = t.read_set | t.write_set
    return {p.id for p in history
            if p.timestamp < t.timestamp
            and (p.id in t.explicit_parents or p.accounts & t.accounts or (p.read_set | p.write_set) & objs)}


def test_independent_transaction_has_no_dependencies():
    index = DependencyIndex()
    index.add(tx("a", "b", 0, write_set=["o1"]))
    t = tx("c", "d", 1, write_set=["o2"])
    index.add(t)
    assert dependency_set(t, index) == set()


def test_shared_account_creates_a_dependency():
    index = DependencyIndex()
    t1 = tx("a", "b", 0)
    t2 = tx("b", "c", 1)
    for t in (t1, t2):
        index.add(t)
    assert dependency_set(t2, index) == {t1.id}
    assert dependency_set(t1, index) == set()


def test_equal_timestamps_are_not_dependencies():
    index = DependencyIndex()
    t1 = tx("a", "b", 5)
    t2 = tx("a", "c", 5)
    for t in (t1, t2):
        index.add(t)
    assert dependency_set(t2, index) == set()


def test_window_evicts_old_transactions():
    index = DependencyIndex(window=2)
    t1, t2, t3 = tx("a", "b", 0), tx("x", "y", 1), tx("p", "q", 2)
    for t in (t1, t2, t3):
        index.add(t)
    assert t1.id not in index and len(index) == 2
    assert dependency_set(tx("a", "z", 3), index) == set()
    with pytest.raises(SchedulerError):
        DependencyIndex(window=0)


def test_dependency_set_matches_pairwise_oracle():
    trace = random_trace(random.Random(1), 20)
    index = DependencyIndex()
    for t in trace:
        index.add(t)
    for t in trace:
        assert dependency_set(t, index) == oracle(t, trace)


@pytest.mark.slow
def test_dependency_set_matches_oracle_over_many_traces():
    for seed in range(100):
        rng = random.Random(seed)
        trace = random_trace(rng, rng.randint(1, 50))
        index = DependencyIndex()
        for t in trace:
            index.add(t)
        for t in trace:
            deps = dependency_set(t, index)
            assert deps == oracle(t, trace)
            assert all(index.get(d).timestamp < t.timestamp for d in deps)


def loads_with(weights, external=None):
    loads = {i: ShardLoad(i) for i in range(len(weights))}
    for i, w in enumerate(weights):
        loads[i].weight = float(w)
    for i, e in (external or {}).items():
        loads[i].external_deps = e
    return loads


def test_threshold_arithmetic():
    loads = loads_with([25, 25, 25, 25], external={1: 8})
    assert compute_threshold(1, loads, 0.5) == 25 + 0.5 * 8 / 100
    assert compute_threshold(1, loads, 0.5) == pytest.approx(25.04)
    assert compute_threshold(0, loads, 0.5) == 25.0
    assert compute_threshold(1, loads, 0.0) == 25.0
    with pytest.raises(SchedulerError):
        compute_threshold(0, loads, 1.5)
    with pytest.raises(ZeroTotalWeight):
        compute_threshold(0, loads_with([0, 0]), 0.5)


def test_rule_overlap_then_lightest():
    loads = loads_with([10, 4, 7])
    t1 = tx("a", "b", 0)
    loads[2].add(t1)
    loads[2].weight = 7.0
    open_all = {i: 100.0 for i in loads}
    assert choose_shard({t1.id}, loads, [0, 1, 2], open_all) == (2, RULE_OVERLAP)
    assert choose_shard(set(), loads, [0, 1, 2], open_all) == (1, RULE_LIGHTEST)
    assert choose_shard({t1.id}, loads, [0, 1, 2], open_all, rules="b") == (1, RULE_LIGHTEST)
    assert choose_shard(set(), loads, [0, 2], {0: 100.0, 2: 5.0}) == (0, RULE_LIGHTEST)
    with pytest.raises(AllShardsSaturated):
        choose_shard(set(), loads, [0, 1], {0: 1.0, 1: 1.0})


def test_threshold_fairness_with_equal_weights():
    plan = make_plan(4, 4)
    loads = {i: ShardLoad(i) for i in plan.shards}
    txs = [tx(f"a{i}", f"b{i}", i) for i in range(41)]
    for t in txs:
        shard = assign(t, plan, loads, delta=0.0, total_weight=len(txs), rules="b")
        loads[shard].add(t)
    weights = [l.weight for l in loads.values()]
    assert max(weights) - min(weights) <= 1.0


def test_admission_boundary():
    loads = [ShardLoad(0, capacity=100.0), ShardLoad(1, capacity=50.0)]
    assert admit(150.0, loads)
    assert not admit(151.0, loads)
    flips = [admit(rate, loads) for rate in range(140, 161)]
    assert sum(1 for a, b in zip(flips, flips[1:]) if a != b) == 1


def test_carry_over_puts_failed_first_in_timestamp_order():
    failed = [tx("a", "b", 9), tx("c", "d", 3), tx("e", "f", 6)]
    fresh = [tx(f"n{i}", f"m{i}", 20 + i) for i in range(5)]
    merged = carry_over(failed, fresh)
    assert [t.timestamp for t in merged[:3]] == [3.0, 6.0, 9.0]
    assert merged[3:] == fresh


def test_coordinator_is_the_majority_owner():
    owners = OwnershipMap()
    owners.home(["acct-a", "obj-1"], 1)
    owners.home(["acct-b"], 0)
    t = tx("acct-a", "acct-b", 0, write_set=["obj-1"])
    assert coordinator_of(t, owners) == 1
    tie = tx("acct-a", "acct-b", 0)
    assert coordinator_of(tie, owners) == 0
    loads = {0: ShardLoad(0, weight=5.0), 1: ShardLoad(1, weight=1.0)}
    assert coordinator_of(tie, owners, loads) == 1


def test_ownership_is_first_come():
    owners = OwnershipMap()
    assert owners.home(["x", "y"], 2) == ["x", "y"]
    assert owners.home(["y", "z"], 0) == ["z"]
    assert owners["y"] == 2
    assert owners.owned_by(0) == {"z"}
    assert sorted(owners.counts([0, 1, 2])) == [0, 1, 2]


def test_batch_assignment_keeps_related_transactions_together():
    plan = make_plan(2, 4)
    scheduler = Scheduler(plan, {0: 100.0, 1: 100.0})
    batch = [tx("a", "b", 0), tx("b", "c", 1), tx("x", "y", 2), tx("y", "z", 3)]
    result = scheduler.assign_batch(batch, epoch=0)
    shard = {a.tx.id: a.shard for a in result.assigned}
    assert shard[batch[0].id] == shard[batch[1].id]
    assert shard[batch[2].id] == shard[batch[3].id]
    assert not result.deferred and not result.rejected
    assert len(scheduler.log) == 4
    assert {row["rule"] for row in scheduler.log} <= {RULE_OVERLAP, RULE_LIGHTEST}


@pytest.mark.slow
def test_scheduler_beats_random_assignment_on_external_dependencies():
    plan = make_plan(4, 4)
    for seed in range(50):
        rng = random.Random(seed)
        trace = sorted(random_trace(rng, 200, accounts=60, objects=30), key=lambda t: (t.timestamp, t.id))
        scheduler = Scheduler(plan, {i: 100.0 for i in plan.shards})
        scheduler.assign_batch(trace)
        baseline = random_assignment_external_deps(trace, 4, random.Random(seed))
        assert scheduler.external_dependency_count() <= baseline


def authorized_setup(retries=3):
    plan = make_plan(2, 4)
    root = (100, 101)
    keys, pairs = KeyRegistry.generate(list(plan.control_nodes) + list(root), seed=2)
    registry = DdidRegistry(keys, root_nodes=root)
    for n in root:
        registry.create_ddid(n, "root", [(REVOKE, 0)], pairs[n].public_key, 0.0)
    for n in plan.control_nodes:
        registry.create_ddid(n, plan.consortium_of[n], [(VALIDATE, 2), (DATA_READ, 0)], pairs[n].public_key, 0.0)
    scheduler = Scheduler(plan, {0: 100.0, 1: 100.0}, registry, retries=retries)
    return plan, registry, pairs, scheduler


def test_shard_without_an_authorized_quorum_is_skipped():
    plan, registry, pairs, scheduler = authorized_setup()
    for n in plan.control[0][:2]:
        registry.revoke(RevocationCertificate.issue(registry.document_of(n).ddid, pairs[100], 1.0))
    t = tx("a", "b", 0, auth_level=1)
    result = scheduler.assign_batch([t], now=2.0)
    assert [a.shard for a in result.assigned] == [1]


def test_unauthorizable_transaction_is_rejected_after_retries():
    plan, registry, pairs, scheduler = authorized_setup(retries=3)
    t = tx("a", "b", 0, auth_level=9)
    for attempt in range(3):
        result = scheduler.assign_batch([t], epoch=attempt)
        assert result.deferred == [t] and not result.rejected
    result = scheduler.assign_batch([t], epoch=3)
    assert [r[0] for r in result.rejected] == [t]
    with pytest.raises(NoAuthorizedShard):
        assign(t, plan, scheduler.loads, registry)


def test_owning_shard_must_hold_an_authorized_quorum():
    plan = make_plan(2, 4)
    keys, pairs = KeyRegistry.generate(list(plan.control_nodes) + [100], seed=2)
    registry = DdidRegistry(keys, root_nodes=(100,))
    for n in plan.control_nodes:
        rank = 3 if n in plan.control[0] else 2
        registry.create_ddid(n, plan.consortium_of[n], [(VALIDATE, rank)], pairs[n].public_key, 0.0)
    owners = OwnershipMap()
    owners.home(["acct-x", "acct-y"], 1)
    owners.home(["acct-z"], 0)
    scheduler = Scheduler(plan, {0: 100.0, 1: 100.0}, registry, ownership=owners)
    with pytest.raises(NoAuthorizedShard):
        scheduler.assign(tx("acct-x", "acct-y", 0, auth_level=3))
    assert scheduler.assign(tx("acct-x", "acct-y", 1, auth_level=2)).shard == 1
    cross = scheduler.assign(tx("acct-x", "acct-z", 2, auth_level=3))
    assert cross.shard == 0 and cross.involved == {0, 1}


def test_saturated_owner_defers_instead_of_overflowing():
    owners = OwnershipMap()
    batch = [tx(f"a{i}", f"b{i}", i) for i in range(4)]
    for t in batch:
        owners.home(t.touched, 1)
    scheduler = Scheduler(make_plan(2, 4), {0: 100.0, 1: 100.0}, ownership=owners)
    result = scheduler.assign_batch(batch)
    assert [a.shard for a in result.assigned] == [1, 1]
    assert result.deferred == batch[2:]
    assert scheduler.loads[0].weight == 0


class PartialRegistry:
    def __init__(self, known, error=None):
        self.known = set(known)
        self.error = error

    def auth_check(self, node, tx, now):
        if self.error is not None:
            raise self.error
        if node not in self.known:
            raise UnknownNode(f"node {node} has no DDID")
        return True


def test_nodes_without_a_ddid_do_not_count_towards_the_quorum():
    plan = make_plan(2, 4)
    known = set(plan.control[0][:2]) | set(plan.control[1])
    assert authorized_shards(tx("a", "b", 0), plan, PartialRegistry(known), 0.0) == [1]
    with pytest.raises(RuntimeError):
        authorized_shards(tx("a", "b", 0), plan, PartialRegistry(known, RuntimeError("registry down")), 0.0)


def test_unknown_rule_set():
    with pytest.raises(SchedulerError):
        Scheduler(make_plan(), {0: 1.0, 1: 1.0}, rules="xyz")


def transfer_ratio(shards, rules, seed, n=10_000, accounts=1000):
    rng = random.Random(seed)
    plan = make_plan(shards, 4)
    owners = OwnershipMap()
    for a in range(accounts):
        owners.home([f"acct-{a}"], rng.randrange(shards))
    scheduler = Scheduler(plan, {i: 1e6 for i in plan.shards}, rules=rules, ownership=owners, window=100)
    trace = []
    for i in range(n):
        a, b = rng.sample(range(accounts), 2)
        trace.append(tx(f"acct-{a}", f"acct-{b}", i))
    cross = total = 0
    pending = []
    for start in range(0, n, 1000):
        pending = carry_over(pending, trace[start:start + 1000])
        result = scheduler.assign_batch(pending)
        cross += sum(a.cross_shard for a in result.assigned)
        total += len(result.assigned)
        pending = result.deferred
    while pending:
        result = scheduler.assign_batch(pending)
        cross += sum(a.cross_shard for a in result.assigned)
        total += len(result.assigned)
        pending = result.deferred
    assert total == n
    return cross / total


@pytest.mark.slow
@pytest.mark.parametrize("shards", [2, 4, 8])
def test_cross_shard_ratio_of_uniform_transfers(shards):
    baseline = transfer_ratio(shards, "b", seed=shards)
    assert baseline == pytest.approx(expected_cross_shard_ratio(shards), abs=0.03)
    assert transfer_ratio(shards, "abc", seed=shards) <= baseline
