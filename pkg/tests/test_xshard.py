import math

import pytest

from tinc.crypto import KeyRegistry
from tinc.errors import UnknownObjectOwner, XShardError
from tinc.ledger import ShardLedger
from tinc.rootplane import TopologyConfig, distribute_nodes
from tinc.scheduler import OwnershipMap
from tinc.simnet import NetConfig, Network
from tinc.xshard import (CrossShardManager, IntraShard, LockTable, Path, TimeoutState, XCommit, classify_and_route,
                         commit_quorum, observe_response)
from tinc.model import Transaction


def make_plan(shards=2, per_shard=4):
    n = shards * per_shard
    control = tuple(range(n))
    data = tuple(range(n, 2 * n))
    consortium_of = {i: f"org{i % 2}" for i in control + data}
    return distribute_nodes(TopologyConfig(control, data, consortium_of), {i: 0.5 for i in control + data}, shards)


def owners_of(mapping):
    owners = OwnershipMap()
    for obj, shard in mapping.items():
        owners.home([obj], shard)
    return owners


HOMES = {"acct-a": 0, "acct-b": 1, "obj-1": 1, "obj-2": 0}


def setup(tau=2, shards=2, homes=HOMES, net=None):
    plan = make_plan(shards)
    keys, pairs = KeyRegistry.generate(plan.control_nodes, seed=9)
    owners = owners_of(homes)
    ledgers = {i: ShardLedger(i, keys, plan.control[i], owns=lambda o, i=i: owners.get(o) == i) for i in plan.shards}
    network = Network(net or NetConfig(latency=1.0, jitter=0.0, bandwidth=1e9), shard_of=plan.shard_of)
    manager = CrossShardManager(network, plan, keys, pairs, ledgers, owners, tau=tau)
    resolved = []
    manager.on_resolved = lambda tx, ok, reason, now: resolved.append((tx.id, ok, reason))
    return manager, network, ledgers, resolved


def cross_tx(**kwargs):
    return Transaction.create("acct-a", "acct-b", write_set=["obj-1"], **kwargs)


def test_commit_quorum():
    assert [commit_quorum(n) for n in (1, 2, 3, 4, 5, 6)] == [1, 2, 2, 3, 4, 4]


def test_routing():
    owners = owners_of(HOMES)
    local = Transaction.create("acct-a", "acct-a", write_set=["obj-2"])
    assert classify_and_route(local, owners) == IntraShard(local.id, 0)

    plan = classify_and_route(cross_tx(read_set=["obj-2"]), owners)
    assert plan.shards == (0, 1)
    assert plan.coordinator == 1
    assert plan.path is Path.FAST
    assert ("obj-2", "obj-1") in plan.edges
    assert sorted(plan.objects_on(0)) == ["acct-a", "obj-2"]

    assert classify_and_route(cross_tx(), owners, locked={"obj-1"}).path is Path.NORMAL
    assert classify_and_route(cross_tx(), owners, tau=1).path is Path.NORMAL

    tie = Transaction.create("acct-a", "acct-b")
    assert classify_and_route(tie, owners).coordinator == 0
    assert classify_and_route(tie, owners, prefer=1).coordinator == 1

    with pytest.raises(UnknownObjectOwner):
        classify_and_route(Transaction.create("acct-a", "acct-zz"), owners)


def test_timeout_follows_observed_responses():
    ts = TimeoutState(t_min=100.0, epsilon=0.1, alpha=0.8)
    assert ts.timeout(0) == 100.0
    observe_response(0, 200.0, ts)
    assert ts.timeout(0) == pytest.approx(220.0)
    observe_response(0, 100.0, ts)
    assert ts.mean[0] == pytest.approx(180.0)
    assert ts.timeout(0) == pytest.approx(198.0)
    observe_response(1, 50.0, ts)
    assert ts.timeout(1) == 100.0
    with pytest.raises(XShardError):
        observe_response(1, -1.0, ts)


def test_lock_table_is_all_or_nothing():
    locks = LockTable()
    assert locks.acquire(b"t1", ["r"], ["w"])
    assert locks.acquire(b"t2", ["r"], [])
    assert not locks.acquire(b"t3", [], ["r"])
    assert not locks.acquire(b"t3", ["x"], ["w"])
    assert "x" not in locks
    assert locks.holder("w") == b"t1"
    locks.release(b"t1")
    locks.release(b"t2")
    assert len(locks) == 0 and "r" not in locks and "w" not in locks


@pytest.mark.parametrize("tau,path", [(2, Path.FAST), (1, Path.NORMAL)])
def test_cross_shard_transaction_commits_everywhere(tau, path):
    manager, network, ledgers, resolved = setup(tau=tau)
    tx = cross_tx()
    route = manager.start(tx)
    assert route.path is path
    network.run_until()
    assert resolved == [(tx.id, True, "")]
    assert manager.outcome_of(tx.id) == {0: "applied", 1: "applied"}
    assert set(ledgers[0].state) == {"acct-a"}
    assert set(ledgers[1].state) == {"acct-b", "obj-1"}
    assert all(not ledgers[i].open_snapshots and len(manager.locks[i]) == 0 for i in (0, 1))
    assert manager.logs[1].get(tx.id) == ("commit" if path is Path.NORMAL else None)
    assert manager.archive[0].path is path


def test_fast_path_saves_one_message_delay():
    # only cross-shard hops cost time
    net = NetConfig(latency=0.0, cross_latency=1.0, jitter=0.0, bandwidth=math.inf)
    delays = {}
    for tau in (1, 2):
        manager, network, _, _ = setup(tau=tau, net=net)
        manager.start(cross_tx())
        network.run_until()
        delays[manager.archive[0].path] = manager.archive[0].apply_delay
    assert delays[Path.FAST] == 2.0
    assert delays[Path.NORMAL] == 3.0


def test_lock_conflict_aborts_and_reverts_every_shard():
    manager, network, ledgers, resolved = setup()
    aborted = []
    manager.events.add_listener(aborted.append, "on_aborted")
    manager.locks[1].acquire(b"other", [], ["obj-1"])
    tx = cross_tx()
    assert manager.start(tx).path is Path.NORMAL
    network.run_until()
    assert [(r[0], r[1]) for r in resolved] == [(tx.id, False)]
    assert set(manager.outcome_of(tx.id).values()) == {"aborted"}
    assert ledgers[0].state == {} and ledgers[1].state == {}
    assert not ledgers[0].open_snapshots
    assert [e.tx_id for e in aborted] == [tx.id]
    assert manager.logs[1].get(tx.id) == "abort"


def test_unresponsive_shard_times_out():
    manager, network, ledgers, resolved = setup(tau=1)
    plan = manager.plan
    for node in plan.control[0][1:3]:
        network.crash(node)
    tx = cross_tx()
    manager.start(tx)
    network.run_until()
    assert resolved and resolved[0][:2] == (tx.id, False)
    assert "shard 0" in resolved[0][2]
    assert set(manager.outcome_of(tx.id).values()) == {"aborted"}
    assert ledgers[0].state == {} and ledgers[1].state == {}


def test_missed_commit_is_recovered_through_status_queries():
    manager, network, ledgers, resolved = setup(tau=1)
    shard0 = set(manager.plan.control[0])
    network.drop_filter = lambda i, src, dst, msg: (
        isinstance(msg, XCommit) and dst in shard0 and manager.counts["status"] == 0)
    tx = cross_tx()
    manager.start(tx)
    network.run_until()
    assert manager.counts["status"] >= 1
    assert resolved == [(tx.id, True, "")]
    assert manager.outcome_of(tx.id) == {0: "applied", 1: "applied"}


def test_epoch_recovery_aborts_when_the_coordinator_is_gone():
    manager, network, ledgers, resolved = setup(tau=1)
    tx = cross_tx()
    manager.start(tx)
    leader = manager.coordinations[tx.id].node
    network.call_later(0.5, lambda: network.crash(leader))
    network.run_until()
    assert manager.in_flight() == [tx.id]
    assert manager.recover() == {tx.id: False}
    assert set(manager.outcome_of(tx.id).values()) == {"aborted"}
    assert ledgers[0].state == {} and ledgers[1].state == {}
    manager.reset_epoch()
    assert not manager.participants and not manager.coordinations


def test_duplicate_start_is_rejected():
    manager, network, _, _ = setup(tau=1)
    tx = cross_tx()
    plan = manager.start(tx)
    with pytest.raises(XShardError):
        manager.run_prepare_phase(tx, plan)


HOMES3 = dict(HOMES, **{"obj-3": 2})


def settle(manager, network):
    network.run_until()
    if manager.in_flight():
        manager.recover()


def assert_atomic(manager, ledgers, resolved, tx, written):
    statuses = set(manager.outcome_of(tx.id).values())
    assert statuses in ({"applied"}, {"aborted"})
    committed = statuses == {"applied"}
    assert {ok for tx_id, ok, _ in resolved if tx_id == tx.id} == {committed}
    for shard, ledger in ledgers.items():
        assert not ledger.open_snapshots
        assert len(manager.locks[shard]) == 0
        if committed:
            assert written[shard] <= set(ledger.state)
        else:
            assert ledger.state == {}
    return committed


@pytest.mark.slow
@pytest.mark.parametrize("shards,tau,homes,writes", [
    (2, 1, HOMES, ["obj-1"]),
    (2, 2, HOMES, ["obj-1"]),
    (3, 1, HOMES3, ["obj-1", "obj-3"]),
    (3, 3, HOMES3, ["obj-1", "obj-3"]),
])
def test_any_single_lost_message_keeps_the_outcome_atomic(shards, tau, homes, writes):
    written = {0: {"acct-a"}, 1: {"acct-b", "obj-1"}, 2: {"obj-3"}}
    manager, network, _, _ = setup(tau=tau, shards=shards, homes=homes)
    manager.start(Transaction.create("acct-a", "acct-b", write_set=writes))
    settle(manager, network)
    total = network.sent
    assert total > 0
    outcomes = set()
    for k in range(total):
        manager, network, ledgers, resolved = setup(tau=tau, shards=shards, homes=homes)
        network.drop_filter = lambda i, src, dst, msg, k=k: i == k
        tx = Transaction.create("acct-a", "acct-b", write_set=writes)
        assert len(manager.start(tx).shards) == shards
        settle(manager, network)
        outcomes.add(assert_atomic(manager, ledgers, resolved, tx, written))
    # most single losses are absorbed by the quorums and status queries
    assert True in outcomes
