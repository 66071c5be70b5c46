"""Access Control Layer: PoW mining race, fork choice, finality, proposeBlock."""

from __future__ import annotations

import math
import random
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

from .chain_core import Identity, PowBlock, leading_zero_bits, verify_pow


class MiningError(RuntimeError):
    """Nonce search gave up; the difficulty is too high for a desk-scale run."""


class NotFinalError(ValueError):
    pass


@dataclass
class Miner:
    id: Identity
    alpha: float
    pending_identity: Identity | None = None

    @property
    def promoted(self) -> Identity:
        return self.pending_identity if self.pending_identity is not None else self.id


@dataclass(frozen=True)
class AclConfig:
    difficulty: int = 8
    finality_depth: int = 6
    expected_block_interval: float = 10.0
    max_nonce_tries: int = 1 << 24

    def __post_init__(self) -> None:
        if self.difficulty < 0:
            raise ValueError("difficulty must be >= 0")
        if self.finality_depth < 1:
            raise ValueError("finality_depth must be >= 1")
        if self.expected_block_interval <= 0:
            raise ValueError("expected_block_interval must be > 0")


def mining_lottery(miners: Sequence[Miner], rng: random.Random) -> int:
    """Index of the miner that finds the next block, drawn with probability alpha."""
    if not miners:
        raise ValueError("no miners")
    alphas = [m.alpha for m in miners]
    if any(a < 0 for a in alphas):
        raise ValueError("negative alpha")
    if not math.isclose(math.fsum(alphas), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"alphas sum to {math.fsum(alphas)}, expected 1")
    u = rng.random()
    acc = 0.0
    for i, a in enumerate(alphas):
        acc += a
        if u < acc:
            return i
    # u landed in the rounding gap above the float sum; give it to the last miner with weight
    return max(i for i, a in enumerate(alphas) if a > 0)


def find_nonce(parent: PowBlock, difficulty: int, p: Identity, max_tries: int) -> int:
    h = parent.hash
    height = parent.height + 1
    for x in range(max_tries):
        if leading_zero_bits(PowBlock(h, difficulty, x, p, height).hash) >= difficulty:
            return x
    raise MiningError(f"no nonce with {difficulty} leading zero bits in {max_tries} tries")


def mine_next_block(tip: PowBlock, winner: Miner, config: AclConfig, rng: random.Random) -> PowBlock:
    x = find_nonce(tip, config.difficulty, winner.promoted, config.max_nonce_tries)
    ts = tip.timestamp + rng.expovariate(1.0 / config.expected_block_interval)
    return PowBlock(tip.hash, config.difficulty, x, winner.promoted, tip.height + 1, ts)


def is_final(chain: Sequence[PowBlock], height: int, config: AclConfig) -> bool:
    if not chain:
        raise ValueError("empty chain")
    tip = chain[-1].height
    if height < 0 or height > tip:
        raise ValueError(f"unknown height {height} (tip {tip})")
    return tip - height >= config.finality_depth


class PowChain:
    """Block tree with longest-chain fork choice.

    Ties between equally long branches go to the lowest tip digest. Once CSL
    commits a block it becomes the anchor: only branches through it count.
    """

    def __init__(self, seed: Sequence[PowBlock]):
        if not seed:
            raise ValueError("seed chain is empty")
        self._blocks: dict[bytes, PowBlock] = {}
        self._children: dict[bytes, list[bytes]] = {}
        self._subtree: set[bytes] = set()
        first = seed[0]
        self._blocks[first.hash] = first
        self._children[first.hash] = []
        for block in seed[1:]:
            if not self.add(block):
                raise ValueError(f"seed block at height {block.height} does not link")
        self.anchor = seed[-1]
        self._reindex()

    def _better(self, a: PowBlock, b: PowBlock) -> bool:
        return a.height > b.height or (a.height == b.height and a.hash < b.hash)

    def _reindex(self) -> None:
        """Recompute the anchor's subtree and the best tip inside it."""
        self._subtree = set()
        best = self.anchor
        stack = [self.anchor.hash]
        while stack:
            key = stack.pop()
            self._subtree.add(key)
            node = self._blocks[key]
            if self._better(node, best):
                best = node
            stack.extend(self._children[key])
        self._best = best

    def __contains__(self, block: PowBlock) -> bool:
        return block.hash in self._blocks

    def __len__(self) -> int:
        return len(self._blocks)

    def add(self, block: PowBlock) -> bool:
        parent = self._blocks.get(block.h)
        if parent is None or not verify_pow(block, parent):
            return False
        key = block.hash
        if key not in self._blocks:
            self._blocks[key] = block
            self._children[key] = []
            self._children[block.h].append(key)
            if block.h in self._subtree:
                self._subtree.add(key)
                if self._better(block, self._best):
                    self._best = block
        return True

    def parent(self, block: PowBlock) -> PowBlock | None:
        return self._blocks.get(block.h)

    def tip(self) -> PowBlock:
        return self._best

    def canonical(self) -> list[PowBlock]:
        out = []
        node: PowBlock | None = self.tip()
        while node is not None:
            out.append(node)
            node = self._blocks.get(node.h) if node.height > 0 else None
        out.reverse()
        return out

    def mark_committed(self, block: PowBlock) -> None:
        if block.hash not in self._blocks:
            raise KeyError("committed block unknown to ACL")
        if block.height >= self.anchor.height:
            self.anchor = block
            self._reindex()


class AccessControlLayer:
    """Miners racing on a shared PoW chain and feeding finalized blocks to CSL.

    ``inbox`` is the in-process proposal queue read by the consensus layer.
    """

    def __init__(
        self,
        miners: Sequence[Miner],
        config: AclConfig,
        seed_chain: Sequence[PowBlock],
        rng: random.Random,
        on_event: Callable[[float, str, str, bytes], None] | None = None,
    ):
        self.miners = list(miners)
        self.config = config
        self.chain = PowChain(seed_chain)
        self.rng = rng
        self.inbox: deque[PowBlock] = deque()
        self.winners: list[int] = []
        self._proposed: set[bytes] = set()
        self._committed: set[bytes] = {b.hash for b in seed_chain}
        self._on_event = on_event

    def _emit(self, time: float, kind: str, actor: str, payload: bytes) -> None:
        if self._on_event is not None:
            self._on_event(time, kind, actor, payload)

    def mine(self) -> PowBlock:
        """Run one lottery and append the winner's block to the canonical tip."""
        idx = mining_lottery(self.miners, self.rng)
        block = mine_next_block(self.chain.tip(), self.miners[idx], self.config, self.rng)
        self.chain.add(block)
        self.winners.append(idx)
        self._emit(block.timestamp, "mine", self.miners[idx].id.display, block.hash)
        return block

    def propose_block(self, block: PowBlock, time: float | None = None) -> bool:
        """Hand a finalized block to CSL. Returns False if it was already proposed."""
        canonical = self.chain.canonical()
        if block.height >= len(canonical) or canonical[block.height] != block:
            raise NotFinalError("block is not on the canonical chain")
        if not is_final(canonical, block.height, self.config):
            raise NotFinalError(f"block at height {block.height} has too few confirmations")
        if block.hash in self._proposed or block.hash in self._committed:
            return False
        self._proposed.add(block.hash)
        self.inbox.append(block)
        self._emit(block.timestamp if time is None else time, "propose_block", block.p.display, block.hash)
        return True

    def propose_finalized(self, time: float | None = None) -> list[PowBlock]:
        canonical = self.chain.canonical()
        out = []
        for block in canonical[self.chain.anchor.height + 1 :]:
            if is_final(canonical, block.height, self.config) and self.propose_block(block, time):
                out.append(block)
        return out

    def on_commit(self, block: PowBlock, time: float) -> None:
        """commitBlock(b): CSL accepted ``block``; miners continue on top of it."""
        self._committed.add(block.hash)
        self.chain.mark_committed(block)
        self._emit(time, "commit_block", block.p.display, block.hash)

    def was_committed(self, block: PowBlock) -> bool:
        return block.hash in self._committed
