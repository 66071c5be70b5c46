"""Domain types shared by both layers: identities, blocks, transactions.

Hashing is SHA-256; signatures are simulated with a keyed digest (HMAC) whose
secret is held in a process-local keyring. Within a simulation nobody can
produce a valid signature for an identity without its :class:`KeyPair`, which
is all the protocol analysis relies on.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

# pubkey -> secret; append-only
_KEYRING: dict[bytes, bytes] = {}


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def leading_zero_bits(data: bytes) -> int:
    n = 0
    for byte in data:
        if byte == 0:
            n += 8
            continue
        return n + 8 - byte.bit_length()
    return n


def _field(value: bytes | int | str) -> bytes:
    if isinstance(value, bool):
        raise TypeError("booleans are not serializable fields")
    if isinstance(value, int):
        if value < 0:
            raise ValueError(f"negative integer field: {value}")
        raw = value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")
    elif isinstance(value, str):
        raw = value.encode("utf-8")
    else:
        raw = bytes(value)
    return len(raw).to_bytes(4, "big") + raw


def encode_fields(*values: bytes | int | str) -> bytes:
    """Length-prefixed concatenation in fixed order (the canonical encoding)."""
    return b"".join(_field(v) for v in values)


@dataclass(frozen=True, order=True)
class Identity:
    pubkey: bytes

    @property
    def display(self) -> str:
        return self.pubkey[:6].hex()

    def __str__(self) -> str:
        return self.display


class KeyPair:
    """A simulated signing key. Creating one registers it for verification."""

    __slots__ = ("_secret", "identity")

    def __init__(self, secret: bytes):
        if len(secret) < 16:
            raise ValueError("secret too short")
        self._secret = bytes(secret)
        self.identity = Identity(digest(b"ashwa/pk" + self._secret))
        _KEYRING.setdefault(self.identity.pubkey, self._secret)

    @classmethod
    def from_seed(cls, seed: bytes | str) -> KeyPair:
        if isinstance(seed, str):
            seed = seed.encode("utf-8")
        return cls(digest(b"ashwa/sk" + seed))

    @classmethod
    def generate(cls, rng: random.Random) -> KeyPair:
        return cls(rng.getrandbits(256).to_bytes(32, "big"))

    def sign(self, payload: bytes) -> bytes:
        return hmac.new(self._secret, payload, hashlib.sha256).digest()

    def __repr__(self) -> str:
        return f"KeyPair({self.identity.display})"


def verify_signature(identity: Identity, payload: bytes, signature: bytes) -> bool:
    secret = _KEYRING.get(identity.pubkey)
    if secret is None:
        return False
    expected = hmac.new(secret, payload, hashlib.sha256).digest()
    return hmac.compare_digest(expected, signature)


@dataclass(frozen=True)
class PowBlock:
    """ACL block <h, d, x, p> at a given height.

    ``timestamp`` is simulation bookkeeping only; it is not part of the
    encoding and does not take part in equality.
    """

    h: bytes
    d: int
    x: int
    p: Identity
    height: int
    timestamp: float = field(default=0.0, compare=False)

    def header(self) -> bytes:
        return encode_fields(b"pow", self.h, self.d, self.x, self.p.pubkey, self.height)

    def serialize(self) -> bytes:
        return self.header()

    @cached_property
    def hash(self) -> bytes:
        return digest(self.header())


def genesis_block(p: Identity) -> PowBlock:
    return PowBlock(h=ZERO_DIGEST, d=0, x=0, p=p, height=0)


def verify_pow(block: PowBlock, parent: PowBlock) -> bool:
    if block.d < 0 or block.x < 0:
        return False
    if block.h != parent.hash:
        return False
    if block.height != parent.height + 1:
        return False
    return leading_zero_bits(block.hash) >= block.d


def verify_chain(blocks: Sequence[PowBlock]) -> bool:
    if not blocks:
        return False
    first = blocks[0]
    if first.height != 0 or first.h != ZERO_DIGEST:
        return False
    return all(verify_pow(child, parent) for parent, child in zip(blocks, blocks[1:]))


@dataclass(frozen=True)
class Transaction:
    """Payment <from, to, sign, coins, txFee>.

    ``nonce`` and ``memo`` are signed along with the rest: the nonce keeps two
    otherwise identical payments distinct, the memo pads a transaction to a
    target wire size.
    """

    sender: Identity
    recipient: Identity
    coins: int
    fee: int
    sign: bytes
    nonce: int = 0
    memo: bytes = b""

    def signed_payload(self) -> bytes:
        return encode_fields(
            b"tx-body",
            self.sender.pubkey,
            self.recipient.pubkey,
            self.coins,
            self.fee,
            self.nonce,
            self.memo,
        )

    def serialize(self) -> bytes:
        return self._wire

    # frozen and immutable, so encodings are computed once
    @cached_property
    def _wire(self) -> bytes:
        return encode_fields(self.signed_payload(), self.sign)

    @cached_property
    def hash(self) -> bytes:
        return digest(self._wire)

    @property
    def byte_size(self) -> int:
        return len(self._wire)


def make_transaction(
    keys: KeyPair,
    recipient: Identity,
    coins: int,
    fee: int,
    nonce: int = 0,
    memo: bytes = b"",
) -> Transaction:
    unsigned = Transaction(keys.identity, recipient, coins, fee, b"", nonce, memo)
    return Transaction(
        keys.identity, recipient, coins, fee, keys.sign(unsigned.signed_payload()), nonce, memo
    )


def min_transaction_size() -> int:
    """Wire size of a transaction with single-byte amounts and no memo."""
    return Transaction(Identity(ZERO_DIGEST), Identity(ZERO_DIGEST), 0, 0, ZERO_DIGEST).byte_size


def padded_memo_length(target_bytes: int) -> int:
    """Memo length that brings a transaction to ``target_bytes`` on the wire."""
    return max(0, target_bytes - min_transaction_size())


def verify_transaction_static(tx: Transaction) -> bool:
    if not isinstance(tx.coins, int) or not isinstance(tx.fee, int):
        return False
    if tx.coins < 0 or tx.fee < 0 or tx.nonce < 0:
        return False
    return verify_signature(tx.sender, tx.signed_payload(), tx.sign)


@dataclass(frozen=True)
class TxBlock:
    txs: tuple[Transaction, ...]
    proposer: Identity

    def serialize(self) -> bytes:
        return self._wire

    @cached_property
    def _wire(self) -> bytes:
        return encode_fields(
            b"txb", self.proposer.pubkey, len(self.txs), *(tx.serialize() for tx in self.txs)
        )

    @property
    def byte_size(self) -> int:
        return len(self._wire)

    @cached_property
    def hash(self) -> bytes:
        return digest(self._wire)

    @property
    def total_fees(self) -> int:
        return sum(tx.fee for tx in self.txs)


@dataclass(frozen=True)
class ComBlock:
    members: tuple[Identity, ...]
    epoch: int

    def serialize(self) -> bytes:
        return encode_fields(b"com", self.epoch, len(self.members), *(m.pubkey for m in self.members))

    @property
    def hash(self) -> bytes:
        return digest(self.serialize())


def identities_of(blocks: Iterable[PowBlock]) -> tuple[Identity, ...]:
    return tuple(b.p for b in blocks)
