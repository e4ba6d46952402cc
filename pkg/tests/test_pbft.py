import dataclasses
import random
from collections import deque

import pytest

from tinc.crypto import KeyRegistry, sign, verify_certificate
from tinc.ddid import DATA_READ, REVOKE, VALIDATE, DdidRegistry, RevocationCertificate
from tinc.errors import BadSignature, DigestMismatch, LeaderUnauthorized, NotLeader, PbftError, UnknownSigner
from tinc.model import Transaction, signing_bytes
from tinc.pbft import Commit, PbftState, Prepare, PrePrepare, Replica, equivocation_check, rotate_leader

MEMBERS = (0, 1, 2, 3)


def cluster(registry_for=None, seed=4, **kwargs):
    # batch() builds unsigned transactions
    kwargs.setdefault("check_tx_signatures", False)
    keys, pairs = KeyRegistry.generate(MEMBERS, seed)
    registry_for = registry_for or {}
    replicas = {n: Replica(n, PbftState(shard=0, members=MEMBERS, leader=0), pairs[n], keys,
                           registry_for.get(n), **kwargs)
                for n in MEMBERS}
    return replicas, pairs, keys


def batch(n=3, offset=0):
    return [Transaction.create(f"acct-{i}", f"acct-{i + 1}", timestamp=float(i)) for i in range(offset, offset + n)]


def run(replicas, queue):
    """Deliver (sender, message, targets) until quiet; returns finalized batches per node."""
    queue = deque(queue)
    finalized = {}
    while queue:
        sender, msg, targets = queue.popleft()
        for node, replica in replicas.items():
            if node == sender or (targets is not None and node not in targets):
                continue
            out = replica.on_message(msg)
            if out.finalized is not None:
                finalized[node] = out.finalized
            queue.extend((node, m, None) for m in out.outbound)
    return finalized


def propose(replicas, txs):
    leader = replicas[0]
    leader.leader_propose(txs)
    return [(0, m, None) for m in leader.drain()]


def signed_vote(cls, pp, pair):
    vote = cls(shard=pp.shard, view=pp.view, seq=pp.seq, digest=pp.digest, signer=pair.owner)
    return dataclasses.replace(vote, signature=sign(pair, vote.vote))


def test_honest_cluster_finalizes_one_batch_everywhere():
    replicas, _, keys = cluster()
    txs = batch()
    finalized = run(replicas, propose(replicas, txs))
    assert sorted(finalized) == list(MEMBERS)
    assert len({f.digest for f in finalized.values()}) == 1
    fb = finalized[2]
    assert fb.txs == tuple(txs)
    assert verify_certificate(fb.prepare_cert, keys, allowed=MEMBERS, min_k=3)
    assert verify_certificate(fb.commit_cert, keys, allowed=MEMBERS, min_k=3)
    assert fb.to_block().seq == 0
    assert all(r.state.seq == 1 for r in replicas.values())


def test_consecutive_batches_take_consecutive_sequence_numbers():
    replicas, _, _ = cluster()
    first = run(replicas, propose(replicas, batch(2)))
    second = run(replicas, propose(replicas, batch(2, offset=10)))
    assert first[1].seq == 0 and second[1].seq == 1
    assert sorted(replicas[3].finalized) == [0, 1]


def test_second_batch_waits_for_the_first():
    replicas, _, _ = cluster()
    replicas[0].leader_propose(batch(1))
    with pytest.raises(PbftError):
        replicas[0].leader_propose(batch(1, offset=5))


def test_equivocating_leader_cannot_split_the_honest_replicas():
    replicas, pairs, _ = cluster()
    pp_a, pp_b = replicas[0].equivocate(batch(2), batch(2, offset=7))
    assert pp_a.slot == pp_b.slot and pp_a.digest != pp_b.digest
    honest_a, honest_b = {1, 2}, {3}
    queue = [
        (0, pp_a, honest_a),
        (0, pp_b, honest_b),
        (0, signed_vote(Prepare, pp_a, pairs[0]), honest_a),
        (0, signed_vote(Prepare, pp_b, pairs[0]), honest_b),
        (0, signed_vote(Commit, pp_a, pairs[0]), honest_a),
        (0, signed_vote(Commit, pp_b, pairs[0]), honest_b),
    ]
    finalized = run(replicas, queue)
    digests = {fb.digest for node, fb in finalized.items() if node != 0}
    assert len(digests) <= 1
    assert 3 not in finalized

    with pytest.raises(DigestMismatch) as info:
        replicas[1].on_message(pp_b)
    assert set(info.value.evidence.digests) == {pp_a.digest, pp_b.digest}
    assert (pp_a.view, pp_a.seq) in replicas[1].evidence


def test_equivocation_check_needs_one_slot_and_two_digests():
    replicas, _, _ = cluster()
    pp_a, pp_b = replicas[0].equivocate(batch(2), batch(2, offset=7))
    evidence = equivocation_check(pp_a, pp_b)
    assert evidence.leader == 0 and (evidence.view, evidence.seq) == pp_a.slot
    assert evidence.digests == tuple(sorted((pp_a.digest, pp_b.digest)))
    assert equivocation_check(pp_b, pp_a) == evidence
    assert equivocation_check(pp_a, pp_a) is None
    assert equivocation_check(pp_a, dataclasses.replace(pp_b, seq=pp_b.seq + 1)) is None


def deliver_randomly(replicas, sends, rng, drop=None):
    """Deliver (sender, message, target) in random order until quiet.

    ``drop`` loses the delivery with that index. Returns the finalized batches
    per node and the number of deliveries attempted.
    """
    pending = list(sends)
    finalized, step = {}, 0
    while pending:
        sender, msg, target = pending.pop(rng.randrange(len(pending)))
        index, step = step, step + 1
        if index == drop:
            continue
        try:
            out = replicas[target].on_message(msg)
        except DigestMismatch:
            continue
        if out.finalized is not None:
            finalized[target] = out.finalized
        pending.extend((target, m, peer) for m in out.outbound for peer in replicas if peer != target)
    return finalized, step


def honest_sends(replicas, txs):
    return [(0, m, peer) for m in propose(replicas, txs) for peer in MEMBERS[1:]]


def equivocating_sends(replicas, pairs, rng):
    pp_a, pp_b = replicas[0].equivocate(batch(2), batch(2, offset=7))
    sends = []
    for peer in MEMBERS[1:]:
        got = rng.choice(((pp_a,), (pp_b,), (pp_a, pp_b)))
        sends.extend((0, pp, peer) for pp in got)
        # the leader votes for both digests everywhere
        sends.extend((0, signed_vote(cls, pp, pairs[0]), peer) for cls in (Prepare, Commit) for pp in (pp_a, pp_b))
    return sends, {pp_a.digest, pp_b.digest}


def assert_one_digest_per_slot(finalized, allowed):
    honest = {node: fb for node, fb in finalized.items() if node != 0}
    assert len({fb.digest for fb in honest.values()}) <= 1
    assert {fb.digest for fb in honest.values()} <= allowed
    assert len({(fb.view, fb.seq) for fb in honest.values()}) <= 1


def test_equivocating_leader_never_splits_honest_replicas_under_any_delivery_order():
    for seed in range(1000):
        rng = random.Random(seed)
        replicas, pairs, _ = cluster()
        sends, digests = equivocating_sends(replicas, pairs, rng)
        finalized, _ = deliver_randomly(replicas, sends, rng)
        assert_one_digest_per_slot(finalized, digests)


def test_equivocating_leader_with_any_single_lost_delivery():
    for seed in range(20):
        replicas, pairs, _ = cluster()
        sends, digests = equivocating_sends(replicas, pairs, random.Random(seed))
        _, total = deliver_randomly(replicas, sends, random.Random(seed))
        for drop in range(total):
            replicas, pairs, _ = cluster()
            sends, digests = equivocating_sends(replicas, pairs, random.Random(seed))
            finalized, _ = deliver_randomly(replicas, sends, random.Random(seed), drop=drop)
            assert_one_digest_per_slot(finalized, digests)


def test_honest_leader_finalizes_under_any_delivery_order():
    txs = batch()
    for seed in range(200):
        replicas, _, _ = cluster()
        finalized, _ = deliver_randomly(replicas, honest_sends(replicas, txs), random.Random(seed))
        assert sorted(finalized) == list(MEMBERS)
        assert {fb.digest for fb in finalized.values()} == {replicas[0].state.accepted[(0, 0)].digest}
        assert all(fb.txs == tuple(txs) and fb.seq == 0 for fb in finalized.values())


def test_honest_leader_survives_any_single_lost_delivery():
    txs = batch()
    replicas, _, _ = cluster()
    _, total = deliver_randomly(replicas, honest_sends(replicas, txs), random.Random(0))
    assert total > 0
    for drop in range(total):
        replicas, _, _ = cluster()
        finalized, _ = deliver_randomly(replicas, honest_sends(replicas, txs), random.Random(0), drop=drop)
        # one lost delivery costs at most the receiver of a lost pre-prepare
        assert len(finalized) >= 3
        assert len({fb.digest for fb in finalized.values()}) == 1


def test_replayed_pre_prepare_is_ignored():
    replicas, _, _ = cluster()
    pp = replicas[0].leader_propose(batch())
    replicas[1].on_message(pp)
    assert replicas[1].on_message(pp).outbound == []


def test_only_the_leader_proposes():
    replicas, pairs, _ = cluster()
    with pytest.raises(NotLeader):
        replicas[1].leader_propose(batch())
    txs = tuple(batch())
    pp = replicas[0].leader_propose(txs)
    rogue = dataclasses.replace(pp, leader=1, signature=None)
    rogue = dataclasses.replace(rogue, signature=sign(pairs[1], signing_bytes(rogue)))
    with pytest.raises(NotLeader):
        replicas[2].on_message(rogue)


def test_forged_messages_are_rejected():
    replicas, pairs, _ = cluster()
    pp = replicas[0].leader_propose(batch())
    forged = dataclasses.replace(pp, signature=sign(pairs[1], signing_bytes(pp)))
    with pytest.raises(BadSignature):
        replicas[2].on_message(forged)
    vote = signed_vote(Prepare, pp, pairs[1])
    with pytest.raises(BadSignature):
        replicas[2].on_message(dataclasses.replace(vote, signer=3))
    keys, outsider = KeyRegistry.generate([9], 4)
    with pytest.raises(UnknownSigner):
        replicas[2].on_message(signed_vote(Prepare, pp, outsider[9]))


def test_messages_from_another_view_are_ignored():
    replicas, pairs, _ = cluster()
    pp = replicas[0].leader_propose(batch())
    old = dataclasses.replace(pp, view=5)
    assert replicas[1].on_message(old).outbound == []
    assert replicas[1].state.phase(0, 0) == 0


def test_invalid_transactions_block_the_prepare():
    replicas, _, _ = cluster(committed=lambda tx_id: False)
    t = batch(1)[0]
    orphan = Transaction.create("acct-x", "acct-y", explicit_parents=[b"\x07" * 32])
    pp = replicas[0].leader_propose([t, t])
    out = replicas[1].on_message(pp)
    assert out.invalid == (t.id,) and out.outbound == []
    assert replicas[1].validate_batch([orphan]) == [orphan.id]
    child = Transaction.create("acct-x", "acct-y", explicit_parents=[t.id])
    assert replicas[1].validate_batch([t, child]) == []
    assert replicas[1].validate_batch([dataclasses.replace(t, weight=5.0)]) == [t.id]


def test_replicas_recheck_sender_signatures_and_sender_ddids():
    keys, pairs = KeyRegistry.generate(list(MEMBERS) + ["acct-s", "acct-r", 100], 4)
    registry = DdidRegistry(keys, root_nodes=(100,))
    registry.create_ddid(100, "root", [(REVOKE, 0)], pairs[100].public_key, 0.0)
    for n in MEMBERS:
        registry.create_ddid(n, f"org{n % 2}", [(VALIDATE, 2)], pairs[n].public_key, 0.0)
    registry.create_ddid("acct-s", "org0", [(VALIDATE, 1)], pairs["acct-s"].public_key, 0.0)
    replica = Replica(1, PbftState(shard=0, members=MEMBERS, leader=0), pairs[1], keys, registry)

    def signed(tx, pair):
        return dataclasses.replace(tx, sender_sig=sign(pair, tx.id))

    plain = signed(Transaction.create("acct-r", "acct-s"), pairs["acct-r"])
    within = signed(Transaction.create("acct-s", "acct-r", auth_level=1), pairs["acct-s"])
    above = signed(Transaction.create("acct-s", "acct-r", auth_level=2), pairs["acct-s"])
    unsigned = Transaction.create("acct-r", "acct-s", timestamp=1.0)
    foreign = signed(Transaction.create("acct-r", "acct-s", timestamp=2.0), pairs["acct-s"])
    assert replica.validate_batch([plain, within, above, unsigned, foreign]) == [above.id, unsigned.id, foreign.id]

    registry.revoke(RevocationCertificate.issue(registry.document_of("acct-s").ddid, pairs[100], 0.0))
    assert replica.validate_batch([plain, within]) == [within.id]


def gated_registry(revoked=()):
    keys, pairs = KeyRegistry.generate(list(MEMBERS) + [100], 4)
    registry = DdidRegistry(keys, root_nodes=(100,))
    registry.create_ddid(100, "root", [(REVOKE, 0)], pairs[100].public_key, 0.0)
    for n in MEMBERS:
        registry.create_ddid(n, f"org{n % 2}", [(VALIDATE, 2), (DATA_READ, 0)], pairs[n].public_key, 0.0)
    for n in revoked:
        registry.revoke(RevocationCertificate.issue(registry.document_of(n).ddid, pairs[100], 0.0))
    return registry


def test_votes_from_revoked_members_do_not_count():
    registry = gated_registry(revoked=(1, 2))
    # 1 and 2 still run without the gate and keep voting
    replicas, _, _ = cluster(registry_for={0: registry, 3: registry})
    finalized = run(replicas, propose(replicas, batch()))
    assert 0 not in finalized and 3 not in finalized


def test_one_revoked_member_leaves_a_quorum():
    registry = gated_registry(revoked=(1,))
    replicas, _, _ = cluster(registry_for={n: registry for n in MEMBERS})
    finalized = run(replicas, propose(replicas, batch()))
    assert sorted(finalized) == [0, 2, 3]


def test_revoked_leader_cannot_propose():
    registry = gated_registry(revoked=(0,))
    replicas, _, _ = cluster(registry_for={n: registry for n in MEMBERS})
    with pytest.raises(LeaderUnauthorized):
        replicas[0].leader_propose(batch())


def test_rotation_prefers_the_best_committee_member():
    state = PbftState(shard=0, members=MEMBERS, leader=0, seq=4)
    reps = {0: 0.9, 1: 0.8, 2: 0.7, 3: 0.95}
    new = rotate_leader(state, reps, committee=[1, 2])
    assert (new.leader, new.view, new.seq) == (1, 1, 4)
    assert rotate_leader(state, reps, committee=[1], flagged=[1]).leader == 3
    assert rotate_leader(state, reps, flagged=MEMBERS).leader == 3
    assert rotate_leader(state, reps, next_seq=9).seq == 9


def test_rotation_returns_unfinished_batches():
    replicas, _, _ = cluster()
    txs = batch()
    replicas[0].leader_propose(txs)
    assert replicas[0].in_flight
    failed = replicas[0].rotate({n: 0.5 for n in MEMBERS})
    assert failed == txs
    assert replicas[0].state.view == 1 and not replicas[0].in_flight
    assert isinstance(replicas[0].state.accepted, dict) and not replicas[0].state.accepted


def test_pre_prepare_is_signed_by_the_leader():
    replicas, pairs, keys = cluster()
    pp = replicas[0].leader_propose(batch())
    assert isinstance(pp, PrePrepare)
    assert keys.verify(signing_bytes(pp), pp.signature, pairs[0].public_key)
