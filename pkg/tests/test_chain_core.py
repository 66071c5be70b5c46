from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, strategies as st

from ashwachain.chain_core import (
    ZERO_DIGEST,
    ComBlock,
    Identity,
    KeyPair,
    PowBlock,
    Transaction,
    TxBlock,
    encode_fields,
    genesis_block,
    leading_zero_bits,
    make_transaction,
    min_transaction_size,
    padded_memo_length,
    verify_chain,
    verify_pow,
    verify_signature,
    verify_transaction_static,
)


def mine(parent: PowBlock, p: Identity, d: int) -> PowBlock:
    x = 0
    while True:
        b = PowBlock(parent.hash, d, x, p, parent.height + 1)
        if leading_zero_bits(b.hash) >= d:
            return b
        x += 1


@given(st.binary(max_size=40))
def test_leading_zero_bits_matches_bit_string(data):
    bits = "".join(f"{b:08b}" for b in data)
    assert leading_zero_bits(data) == len(bits) - len(bits.lstrip("0"))


def test_encoding_is_injective_on_field_boundaries():
    assert encode_fields(b"ab", b"c") != encode_fields(b"a", b"bc")
    assert encode_fields(0) == b"\x00\x00\x00\x01\x00"
    with pytest.raises(ValueError):
        encode_fields(-1)
    with pytest.raises(TypeError):
        encode_fields(True)


def test_block_hash_is_sha256_of_header():
    p = KeyPair.from_seed("miner").identity
    g = genesis_block(p)
    assert g.hash == hashlib.sha256(g.header()).digest()
    assert g.h == ZERO_DIGEST and g.height == 0


def test_timestamp_does_not_affect_identity():
    p = KeyPair.from_seed("miner").identity
    a = PowBlock(ZERO_DIGEST, 0, 1, p, 1, timestamp=3.0)
    b = PowBlock(ZERO_DIGEST, 0, 1, p, 1, timestamp=9.0)
    assert a == b and a.hash == b.hash


def test_verify_pow_checks_parent_height_and_difficulty():
    p = KeyPair.from_seed("miner").identity
    g = genesis_block(p)
    b = mine(g, p, 8)
    assert verify_pow(b, g)
    assert not verify_pow(PowBlock(b.h, b.d, b.x, b.p, b.height + 1), g)
    assert not verify_pow(PowBlock(ZERO_DIGEST, b.d, b.x, b.p, b.height), g)
    # claiming more work than the hash shows
    assert not verify_pow(PowBlock(b.h, leading_zero_bits(b.hash) + 1, b.x, b.p, b.height), g)


def test_verify_chain():
    p = KeyPair.from_seed("miner").identity
    chain = [genesis_block(p)]
    for _ in range(5):
        chain.append(mine(chain[-1], p, 4))
    assert verify_chain(chain)
    assert not verify_chain(chain[1:])
    assert not verify_chain([chain[0], chain[2]])
    assert not verify_chain([])


def test_signatures_bind_payload_and_signer():
    alice, bob = KeyPair.from_seed("alice"), KeyPair.from_seed("bob")
    sig = alice.sign(b"hello")
    assert verify_signature(alice.identity, b"hello", sig)
    assert not verify_signature(alice.identity, b"hellO", sig)
    assert not verify_signature(bob.identity, b"hello", sig)
    assert not verify_signature(Identity(b"\x01" * 32), b"hello", sig)


def test_transaction_signature_and_forgery():
    alice, bob = KeyPair.from_seed("alice"), KeyPair.from_seed("bob")
    tx = make_transaction(alice, bob.identity, 30, 1)
    assert verify_transaction_static(tx)
    forged = Transaction(tx.sender, tx.recipient, 31, tx.fee, tx.sign)
    assert not verify_transaction_static(forged)
    assert not verify_transaction_static(Transaction(bob.identity, alice.identity, 1, 0, tx.sign))


def test_nonce_distinguishes_repeated_payments():
    alice, bob = KeyPair.from_seed("alice"), KeyPair.from_seed("bob")
    assert make_transaction(alice, bob.identity, 5, 1, 0).hash != make_transaction(alice, bob.identity, 5, 1, 1).hash


@pytest.mark.parametrize("target", [min_transaction_size(), 200, 512])
def test_memo_padding_reaches_target_size(target):
    alice, bob = KeyPair.from_seed("alice"), KeyPair.from_seed("bob")
    tx = make_transaction(alice, bob.identity, 1, 1, 0, bytes(padded_memo_length(target)))
    assert tx.byte_size == target


def test_memo_padding_never_negative():
    assert padded_memo_length(10) == 0


def test_block_encodings_change_with_content():
    alice, bob = KeyPair.from_seed("alice"), KeyPair.from_seed("bob")
    t1 = make_transaction(alice, bob.identity, 1, 0)
    t2 = make_transaction(alice, bob.identity, 2, 0)
    assert TxBlock((t1, t2), alice.identity).hash != TxBlock((t2, t1), alice.identity).hash
    assert TxBlock((t1,), alice.identity).total_fees == 0
    c = ComBlock((alice.identity, bob.identity), 0)
    assert c.hash != ComBlock((bob.identity, alice.identity), 0).hash
    assert c.hash != ComBlock((alice.identity, bob.identity), 1).hash
