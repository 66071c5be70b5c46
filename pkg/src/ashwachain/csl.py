"""Consensus Layer shared state and its three operations.

A :class:`SharedState` is one replica's copy of {PowChain, T, ComChain,
TxChain, O, B}. The ``commit_*`` functions mutate the replica in place and
return it; they refuse operations that lack a supermajority of valid
endorsements from the current committee.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .bft import Endorsement, endorsement_payload, supermajority_threshold
from .chain_core import (
    ComBlock,
    Identity,
    KeyPair,
    PowBlock,
    Transaction,
    TxBlock,
    digest,
    encode_fields,
    genesis_block,
    identities_of,
    verify_pow,
    verify_signature,
    verify_transaction_static,
)


class ProtocolError(RuntimeError):
    pass


class ThresholdError(ProtocolError):
    pass


class OpKind(Enum):
    POW_BLOCK = "powBlock"
    TX_BLOCK = "txBlock"
    COM_BLOCK = "comBlock"


@dataclass(frozen=True)
class Operation:
    kind: OpKind
    payload: PowBlock | TxBlock | ComBlock
    signatures: frozenset[Endorsement] = frozenset()

    @cached_property
    def digest(self) -> bytes:
        return digest(encode_fields(b"op", self.kind.value, self.payload.serialize()))

    def with_signatures(self, sigs: Iterable[Endorsement]) -> Operation:
        return replace(self, signatures=frozenset(sigs))


@dataclass
class EpochState:
    epoch_index: int
    round_in_epoch: int
    committee: tuple[Identity, ...]
    rounds_completed: int = 0


@dataclass
class SharedState:
    n_csl: int
    block_reward: int
    pow_chain: list[PowBlock]
    com_chain: list[ComBlock]
    balances: dict[Identity, int]
    epoch: EpochState
    signers: list[tuple[Identity, ...]] = field(default_factory=list)  # T
    tx_chain: list[TxBlock] = field(default_factory=list)
    op_log: list[Operation] = field(default_factory=list)  # O
    applied_txs: set[bytes] = field(default_factory=set)
    violations: list[str] = field(default_factory=list)
    initial_supply: int = 0

    @property
    def committee(self) -> tuple[Identity, ...]:
        return self.epoch.committee

    @property
    def tip(self) -> PowBlock:
        return self.pow_chain[-1]

    @property
    def boundary_reached(self) -> bool:
        return self.epoch.round_in_epoch >= self.n_csl

    def total_supply(self) -> int:
        return sum(self.balances.values())

    def clone(self) -> SharedState:
        return copy.deepcopy(self)


def genesis_state(
    committee: Sequence[Identity],
    balances: Mapping[Identity, int],
    block_reward: int = 0,
    genesis_identity: Identity | None = None,
) -> SharedState:
    """Epoch-0 state: a genesis block followed by one seed block per seat.

    The seed blocks carry the genesis committee, so the genesis ComBlock
    already equals the latest n_CSL PowChain identities.
    """
    n = len(committee)
    if n < 1:
        raise ValueError("empty genesis committee")
    if any(v < 0 for v in balances.values()):
        raise ValueError("negative genesis balance")
    chain = [genesis_block(genesis_identity or KeyPair.from_seed("genesis").identity)]
    for member in committee:
        parent = chain[-1]
        chain.append(PowBlock(parent.hash, 0, 0, member, parent.height + 1))
    com = ComBlock(tuple(committee), 0)
    bal = dict(balances)
    return SharedState(
        n_csl=n,
        block_reward=block_reward,
        pow_chain=chain,
        com_chain=[com],
        balances=bal,
        epoch=EpochState(0, 0, tuple(committee)),
        initial_supply=sum(bal.values()),
    )


def latest_identities(state: SharedState) -> tuple[Identity, ...]:
    return identities_of(state.pow_chain[-state.n_csl :])


def valid_endorsements(op: Operation, committee: Sequence[Identity]) -> list[Endorsement]:
    """Endorsements from distinct committee seats with a valid signature, by seat."""
    d = op.digest
    by_seat: dict[int, Endorsement] = {}
    for e in sorted(op.signatures, key=lambda e: (e.seat, e.signature)):
        if e.seat in by_seat or not 0 <= e.seat < len(committee):
            continue
        if committee[e.seat] != e.signer:
            continue
        if verify_signature(e.signer, endorsement_payload(d, e.seat), e.signature):
            by_seat[e.seat] = e
    return [by_seat[s] for s in sorted(by_seat)]


def count_valid_endorsements(op: Operation, committee: Sequence[Identity]) -> int:
    return len(valid_endorsements(op, committee))


def _require_threshold(state: SharedState, op: Operation) -> None:
    have = count_valid_endorsements(op, state.committee)
    need = supermajority_threshold(len(state.committee))
    if have < need:
        raise ThresholdError(f"{op.kind.value}: {have} valid endorsements, need {need}")


# -- validation -------------------------------------------------------------


def validate_pow_block(state: SharedState, b: PowBlock) -> bool:
    return verify_pow(b, state.tip)


def validate_com_block(state: SharedState, c: ComBlock) -> bool:
    if c.epoch != len(state.com_chain):
        return False
    return len(c.members) == state.n_csl and tuple(c.members) == latest_identities(state)


def _apply_txs(balances: dict[Identity, int], txs: Iterable[Transaction], seen: set[bytes]) -> bool:
    for tx in txs:
        key = tx.hash
        if key in seen or not verify_transaction_static(tx):
            return False
        cost = tx.coins + tx.fee
        if balances.get(tx.sender, 0) < cost:
            return False
        balances[tx.sender] = balances.get(tx.sender, 0) - cost
        balances[tx.recipient] = balances.get(tx.recipient, 0) + tx.coins
        seen.add(key)
    return True


def validate_tx_block(state: SharedState, t: TxBlock) -> bool:
    if not t.txs:
        return False
    return _apply_txs(dict(state.balances), t.txs, set(state.applied_txs))


def validate_operation(state: SharedState, op: Operation) -> bool:
    if op.kind is OpKind.POW_BLOCK:
        return isinstance(op.payload, PowBlock) and not state.boundary_reached and validate_pow_block(state, op.payload)
    if op.kind is OpKind.COM_BLOCK:
        return isinstance(op.payload, ComBlock) and state.boundary_reached and validate_com_block(state, op.payload)
    return isinstance(op.payload, TxBlock) and validate_tx_block(state, op.payload)


# -- commit rules ------------------------------------------------------------


def commit_pow_block(state: SharedState, op: Operation) -> SharedState:
    if op.kind is not OpKind.POW_BLOCK:
        raise ProtocolError(f"expected powBlock, got {op.kind.value}")
    _require_threshold(state, op)
    if state.boundary_reached:
        raise ProtocolError("epoch boundary reached: comBlock must be committed first")
    state.op_log.append(op)
    state.pow_chain.append(op.payload)
    state.epoch.round_in_epoch += 1
    state.epoch.rounds_completed += 1
    return state


def commit_tx_block(state: SharedState, op: Operation, proposer: Identity | None = None) -> SharedState:
    """Apply a committed transaction block.

    Senders pay coins + fee. The block reward plus the fees of the applied
    transactions are split evenly over the endorsing seats; the integer
    remainder goes to the block's proposer. Transactions that fail validation
    at this point are skipped and logged as protocol violations.
    """
    if op.kind is not OpKind.TX_BLOCK:
        raise ProtocolError(f"expected txBlock, got {op.kind.value}")
    _require_threshold(state, op)
    t: TxBlock = op.payload  # type: ignore[assignment]
    state.op_log.append(op)
    fees = 0
    for tx in t.txs:
        if _apply_txs(state.balances, (tx,), state.applied_txs):
            fees += tx.fee
        else:
            state.violations.append(f"invalid tx {tx.hash.hex()[:12]} in committed txBlock")
    signers = tuple(e.signer for e in valid_endorsements(op, state.committee))
    state.signers.append(signers)
    pot = fees + state.block_reward
    share, remainder = divmod(pot, len(signers))
    for v in signers:
        state.balances[v] = state.balances.get(v, 0) + share
    if remainder:
        who = proposer or t.proposer
        state.balances[who] = state.balances.get(who, 0) + remainder
    state.tx_chain.append(t)
    return state


def commit_com_block(state: SharedState, op: Operation) -> SharedState:
    if op.kind is not OpKind.COM_BLOCK:
        raise ProtocolError(f"expected comBlock, got {op.kind.value}")
    _require_threshold(state, op)
    if not state.boundary_reached:
        raise ProtocolError("comBlock before the epoch boundary")
    c: ComBlock = op.payload  # type: ignore[assignment]
    state.op_log.append(op)
    state.com_chain.append(c)
    state.epoch = EpochState(
        epoch_index=state.epoch.epoch_index + 1,
        round_in_epoch=0,
        committee=tuple(c.members),
        rounds_completed=state.epoch.rounds_completed,
    )
    return state


def apply_operation(state: SharedState, op: Operation) -> SharedState:
    if op.kind is OpKind.POW_BLOCK:
        return commit_pow_block(state, op)
    if op.kind is OpKind.TX_BLOCK:
        return commit_tx_block(state, op)
    return commit_com_block(state, op)


def next_com_block(state: SharedState) -> ComBlock:
    return ComBlock(latest_identities(state), len(state.com_chain))


def select_primary(state: SharedState, view_offset: int = 0) -> Identity:
    seat = primary_seat(state, view_offset)
    return state.committee[seat]


def primary_seat(state: SharedState, view_offset: int = 0) -> int:
    n = len(state.committee)
    if n == 0:
        raise ValueError("empty committee")
    return (state.epoch.rounds_completed + view_offset) % n


def replay(genesis: SharedState, ops: Iterable[Operation]) -> SharedState:
    state = genesis.clone()
    for op in ops:
        apply_operation(state, op)
    return state


# -- snapshot export ---------------------------------------------------------


def _chain_digest(items: Iterable[bytes]) -> str:
    acc = bytes(32)
    for item in items:
        acc = digest(acc + item)
    return acc.hex()


def snapshot(state: SharedState) -> str:
    """Line-oriented export for diffing replicas across runs."""
    lines = [
        f"chain powChain {_chain_digest(b.hash for b in state.pow_chain)}",
        f"chain comChain {_chain_digest(c.hash for c in state.com_chain)}",
        f"chain txChain {_chain_digest(t.hash for t in state.tx_chain)}",
        f"chain opLog {_chain_digest(op.digest for op in state.op_log)}",
        f"chain T {_chain_digest(b''.join(s.pubkey for s in sig) for sig in state.signers)}",
    ]
    for ident in sorted(state.balances):
        lines.append(f"balance {ident.pubkey.hex()} {state.balances[ident]}")
    return "\n".join(lines) + "\n"


def state_digest(state: SharedState) -> str:
    return digest(snapshot(state).encode()).hex()
