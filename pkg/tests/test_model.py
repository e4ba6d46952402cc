import dataclasses

import pytest

from tinc.crypto import KeyRegistry, sign
from tinc.errors import DecodeError, EmptyLeafSet, InvalidTransaction, ModelError
from tinc.model import (ZERO_DIGEST, Block, CostModel, Transaction, batch_digest, canonical_bytes, decode, digest,
                        merkle_proof, merkle_root, signing_bytes, verify_header, verify_merkle_proof)


def make_tx(i=0, **kwargs):
    return Transaction.create(f"acct-{i}", f"acct-{i + 1}", timestamp=float(i), **kwargs)


def test_canonical_bytes_ignore_set_and_dict_order():
    a = {"b": frozenset({"x", "y", "z"}), "a": 1}
    b = {"a": 1, "b": frozenset({"z", "y", "x"})}
    assert canonical_bytes(a) == canonical_bytes(b)


def test_canonical_bytes_distinguish_types():
    assert canonical_bytes(1) != canonical_bytes(1.0)
    assert canonical_bytes(True) != canonical_bytes(1)
    assert canonical_bytes("a") != canonical_bytes(b"a")
    assert canonical_bytes(None) == b"N"


def test_nan_and_oversized_ints_are_rejected():
    with pytest.raises(ModelError):
        canonical_bytes(float("nan"))
    with pytest.raises(ModelError):
        canonical_bytes(2 ** 70)


def test_transaction_id_excludes_signature():
    keys, pairs = KeyRegistry.generate(["acct-0"], seed=3)
    tx = make_tx(0, write_set=["obj-1"], read_set=["obj-2"])
    assert tx.id == digest(signing_bytes(tx))
    signed = dataclasses.replace(tx, sender_sig=sign(pairs["acct-0"], tx.id))
    assert signed.id == tx.id
    assert signed.id_valid
    assert signed.leaf != tx.leaf


def test_decode_rebuilds_a_signed_transaction():
    keys, pairs = KeyRegistry.generate(["acct-0"], seed=3)
    tx = make_tx(0, write_set=["obj-1"], explicit_parents=[b"\x01" * 32], payload=b"hello")
    tx = dataclasses.replace(tx, sender_sig=sign(pairs["acct-0"], tx.id))
    assert decode(canonical_bytes(tx)) == tx


def test_decode_rejects_garbage():
    data = canonical_bytes(make_tx())
    with pytest.raises(DecodeError):
        decode(data + b"\x00")
    with pytest.raises(DecodeError):
        decode(data[:-3])
    with pytest.raises(DecodeError):
        decode(b"Q")


def test_transaction_validation():
    with pytest.raises(InvalidTransaction):
        Transaction.create("a", "b", weight=-1.0)
    with pytest.raises(InvalidTransaction):
        Transaction.create("a", "b", auth_level=-1)


def test_accounts_are_written_objects():
    tx = make_tx(4, write_set=["obj-9"], read_set=["obj-1"])
    assert tx.writes == {"acct-4", "acct-5", "obj-9"}
    assert tx.touched == {"acct-4", "acct-5", "obj-9", "obj-1"}


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13])
def test_merkle_proofs_verify_every_leaf(n):
    leaves = [digest(bytes([i])) for i in range(n)]
    root = merkle_root(leaves)
    for i, leaf in enumerate(leaves):
        proof = merkle_proof(leaves, i)
        assert verify_merkle_proof(leaf, proof, root)
        assert not verify_merkle_proof(digest(b"other"), proof, root)


def test_merkle_single_leaf_is_root_and_empty_is_an_error():
    leaf = digest(b"x")
    assert merkle_root([leaf]) == leaf
    with pytest.raises(EmptyLeafSet):
        merkle_root([])
    with pytest.raises(EmptyLeafSet):
        merkle_proof([], 0)
    assert batch_digest([]) == ZERO_DIGEST


def test_batch_digest_depends_on_order():
    txs = [make_tx(i) for i in range(3)]
    assert batch_digest(txs) != batch_digest(list(reversed(txs)))


def test_header_commits_to_block_contents():
    block = Block(shard=1, epoch=0, seq=0, txs=tuple(make_tx(i) for i in range(4)))
    header = block.header(ZERO_DIGEST)
    assert verify_header(block, header)
    tampered = Block(shard=1, epoch=0, seq=0, txs=block.txs[:3])
    assert not verify_header(tampered, header)
    assert block.header(header.header_hash).prev_header_hash == header.header_hash


def test_cost_model_constants_must_be_positive():
    CostModel(1.0, 2.0, 0.5)
    with pytest.raises(ModelError):
        CostModel(t_m=0.0)
    with pytest.raises(ModelError):
        CostModel(t_t=-1.0)
