"""Discrete-event session driver.

A session wires PoW mining, the committee's shared state, the agreement
engine and BAR agents together and runs a fixed number of rounds. Time is
simulated: an agreement occupies one latency window (two view-change
timeouts when the primary misbehaves), and a powBlock cannot be agreed on
before the ACL has finalized it.
"""

from __future__ import annotations

import csv
import io
import math
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .acl import AccessControlLayer, AclConfig, Miner
from .agents import (
    AgentProfile,
    AgentType,
    BeliefModel,
    CommitteeGame,
    GameParams,
    Strategy,
    act_on_proposal,
    as_fraction,
    best_response,
)
from .analysis import nic_check
from .bft import AgreementRound, BftConfig, Outcome, Seat, fault_threshold, run_agreement
from .chain_core import (
    ZERO_DIGEST,
    ComBlock,
    Identity,
    KeyPair,
    PowBlock,
    Transaction,
    TxBlock,
    encode_fields,
    make_transaction,
    min_transaction_size,
    padded_memo_length,
)
from .csl import (
    OpKind,
    Operation,
    ProtocolError,
    SharedState,
    commit_com_block,
    commit_pow_block,
    commit_tx_block,
    genesis_state,
    latest_identities,
    next_com_block,
    primary_seat,
    state_digest,
    validate_operation,
)
from .events import Trace, parse_trace

# Average block time (s) by committee size, as measured on the original PBFT testbed.
REFERENCE_BLOCK_TIMES: dict[int, float] = {
    21: 9.0,
    31: 23.0,
    41: 54.0,
    51: 114.0,
    61: 174.0,
    71: 278.0,
    81: 420.0,
    91: 879.0,
}

BLOCK_BYTES = 16 * 2**20
TX_BYTES = 200
BYZANTINE_MODES = ("invalid", "equivocate", "silent")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    base: float = 1.0
    per_message: float = 0.05
    quadratic_factor: float = 0.04

    def __post_init__(self) -> None:
        if min(self.base, self.per_message, self.quadratic_factor) < 0:
            raise ValueError("latency parameters must be >= 0")


def _interpolate(n: int, table: Mapping[int, float]) -> float:
    xs = sorted(table)
    if n in table:
        return float(table[n])
    if n < xs[0]:
        # below the table: scale the first point quadratically, keeps the curve increasing
        return table[xs[0]] * (n / xs[0]) ** 2
    if n > xs[-1]:
        if len(xs) == 1:
            return table[xs[0]] * (n / xs[0]) ** 2
        x0, x1 = xs[-2], xs[-1]
    else:
        i = next(i for i, x in enumerate(xs) if x > n)
        x0, x1 = xs[i - 1], xs[i]
    y0, y1 = table[x0], table[x1]
    return y0 + (y1 - y0) * (n - x0) / (x1 - x0)


def consensus_round_time(
    n_csl: int,
    model: LatencyModel | None = None,
    calibration: Mapping[int, float] | None = None,
) -> float:
    """Simulated seconds for one agreement at committee size ``n_csl``."""
    if n_csl < 1:
        raise ValueError("committee size must be >= 1")
    if calibration:
        return _interpolate(n_csl, calibration)
    m = model or LatencyModel()
    return m.base + m.per_message * n_csl + m.quadratic_factor * n_csl**2


def throughput(block_time: float, block_bytes: int = BLOCK_BYTES, tx_bytes: int = TX_BYTES) -> float:
    if block_time <= 0:
        raise ValueError("block time must be > 0")
    if block_bytes <= 0 or tx_bytes <= 0:
        raise ValueError("sizes must be > 0")
    return (block_bytes / tx_bytes) / block_time


# -- mining fairness ---------------------------------------------------------


@dataclass(frozen=True)
class MinerShare:
    index: int
    blocks: int
    total: int
    expected: float  # alpha
    sigma: float  # binomial standard deviation of the block count

    @property
    def share(self) -> float:
        return self.blocks / self.total if self.total else 0.0

    @property
    def within(self) -> bool:
        return abs(self.blocks - self.expected * self.total) <= 3 * self.sigma + 1e-9


@dataclass(frozen=True)
class FairnessReport:
    total: int
    shares: tuple[MinerShare, ...]
    insufficient: bool

    @property
    def passed(self) -> bool:
        return all(s.within for s in self.shares)


def fairness_report(winners: Sequence[int], alphas: Sequence[float], min_blocks: int = 100) -> FairnessReport:
    """Per-miner block shares against Binomial(total, alpha) with 3-sigma bounds."""
    total = len(winners)
    counts = [0] * len(alphas)
    for w in winners:
        counts[w] += 1
    shares = []
    for i, a in enumerate(alphas):
        shares.append(
            MinerShare(
                index=i,
                blocks=counts[i],
                total=total,
                expected=a,
                sigma=math.sqrt(total * a * (1 - a)),
            )
        )
    return FairnessReport(total, tuple(shares), total < min_blocks)


def run_mining(
    alphas: Sequence[float],
    blocks: int,
    seed: int,
    config: AclConfig | None = None,
) -> tuple[list[int], Trace]:
    """Mine ``blocks`` blocks with one miner per alpha; returns winners and the trace."""
    cfg = config or AclConfig(difficulty=0)
    keys = [KeyPair.from_seed(f"ashwa:{seed}:miner:{i}") for i in range(len(alphas))]
    miners = [Miner(k.identity, a) for k, a in zip(keys, alphas)]
    trace = Trace()
    genesis = PowBlock(ZERO_DIGEST, 0, 0, KeyPair.from_seed(f"ashwa:{seed}:genesis").identity, 0)
    acl = AccessControlLayer(
        miners, cfg, [genesis], random.Random(f"ashwa:{seed}:acl"), on_event=lambda t, k, a, p: trace.record(t, k, a, p)
    )
    for _ in range(blocks):
        acl.mine()
    return acl.winners, trace


# -- sessions ----------------------------------------------------------------


@dataclass
class SessionConfig:
    seed: int = 0
    n_csl: int = 4
    n_honest: int = 4
    n_rational: int = 0
    n_byzantine: int = 0
    alphas: tuple[float, ...] | None = None  # mining share per agent; default equal
    kappas: tuple[float, ...] | None = None  # stake per agent; default kappa_r
    game: GameParams = field(default_factory=lambda: GameParams(tr=10, c_mine=100, c_val=0, phi=0, n_tx=50, kappa_r=100))
    acl: AclConfig = field(default_factory=AclConfig)
    bft: BftConfig = field(default_factory=BftConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)
    calibration: Mapping[int, float] | None = None
    block_bytes: int = BLOCK_BYTES
    tx_bytes: int = TX_BYTES
    duration_rounds: int = 20
    tx_blocks_per_round: int = 2
    tx_fill: float = 0.9
    tx_rate: float | None = None  # arrivals per simulated second; default fills blocks to tx_fill
    n_accounts: int = 16
    account_balance: int = 10**12
    block_reward: int = 0
    rho_s1: float = 0.0
    byzantine_mode: str = "invalid"
    stall_limit: int | None = None  # failed attempts per slot before liveness is declared lost
    liveness_slack: int = 10

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        n = self.n_csl
        if n < 1:
            raise ConfigError("n_csl must be >= 1")
        if min(self.n_honest, self.n_rational, self.n_byzantine) < 0:
            raise ConfigError("agent counts must be >= 0")
        if self.n_honest + self.n_rational + self.n_byzantine != n:
            raise ConfigError(
                f"n_honest + n_rational + n_byzantine must equal n_csl "
                f"({self.n_honest} + {self.n_rational} + {self.n_byzantine} != {n})"
            )
        if self.duration_rounds < 1:
            raise ConfigError("duration_rounds must be >= 1")
        if self.alphas is not None:
            if len(self.alphas) != n:
                raise ConfigError(f"alphas needs {n} entries, got {len(self.alphas)}")
            if any(a < 0 for a in self.alphas) or not math.isclose(math.fsum(self.alphas), 1.0, abs_tol=1e-9):
                raise ConfigError("alphas must be >= 0 and sum to 1")
        if self.kappas is not None:
            if len(self.kappas) != n:
                raise ConfigError(f"kappas needs {n} entries, got {len(self.kappas)}")
            if any(k < 0 for k in self.kappas):
                raise ConfigError("kappas must be >= 0")
        if self.byzantine_mode not in BYZANTINE_MODES:
            raise ConfigError(f"byzantine_mode must be one of {', '.join(BYZANTINE_MODES)}")
        if self.tx_bytes < min_transaction_size():
            raise ConfigError(f"tx_bytes must be >= {min_transaction_size()} (a signed transaction)")
        if self.block_bytes < self.tx_bytes + 64:
            raise ConfigError("block_bytes must hold at least one transaction")
        if self.tx_blocks_per_round < 0:
            raise ConfigError("tx_blocks_per_round must be >= 0")
        if not 0 < self.tx_fill <= 1:
            raise ConfigError("tx_fill must be in (0, 1]")
        if self.tx_rate is not None and self.tx_rate <= 0:
            raise ConfigError("tx_rate must be > 0")
        if self.n_accounts < 2:
            raise ConfigError("n_accounts must be >= 2")
        if not 0 <= self.rho_s1 <= 1:
            raise ConfigError("rho_s1 must be in [0, 1]")
        if self.stall_limit is not None and self.stall_limit < 1:
            raise ConfigError("stall_limit must be >= 1")

    def agent_alphas(self) -> tuple[float, ...]:
        return self.alphas if self.alphas is not None else tuple(1 / self.n_csl for _ in range(self.n_csl))

    def agent_kappas(self) -> tuple[float, ...]:
        k = float(as_fraction(self.game.kappa_r))
        return self.kappas if self.kappas is not None else tuple(k for _ in range(self.n_csl))

    def agent_types(self) -> list[AgentType]:
        return (
            [AgentType.HONEST] * self.n_honest
            + [AgentType.RATIONAL] * self.n_rational
            + [AgentType.BYZANTINE] * self.n_byzantine
        )

    def adversary_alpha(self) -> float:
        alphas = self.agent_alphas()
        return math.fsum(a for a, t in zip(alphas, self.agent_types()) if t is AgentType.BYZANTINE)


METRICS_VERSION = "ashwachain-session-metrics/1"
METRICS_COLUMNS = (
    "seed",
    "n_csl",
    "rounds",
    "epochs",
    "committed_pow_blocks",
    "committed_tx_blocks",
    "committed_com_blocks",
    "committed_txs",
    "submitted_txs",
    "invalid_blocks_committed",
    "safety_violations",
    "view_changes",
    "resets",
    "liveness_lost",
    "max_tx_latency_rounds",
    "overdue_txs",
    "avg_messages_per_round",
    "avg_tx_block_time",
    "tps",
    "duration",
    "max_byzantine_seats",
    "nic",
    "replicas_consistent",
)


@dataclass
class SessionMetrics:
    seed: int
    n_csl: int
    committed_tx_blocks: int = 0
    committed_pow_blocks: int = 0
    committed_com_blocks: int = 0
    committed_txs: int = 0
    submitted_txs: int = 0
    invalid_blocks_committed: int = 0
    safety_violations: int = 0
    view_changes: int = 0
    resets: int = 0
    messages_per_round: list[int] = field(default_factory=list)  # one entry per agreement instance
    avg_tx_block_time: float = 0.0
    tps: float = 0.0
    duration: float = 0.0
    per_agent_realized_utility: dict[str, float] = field(default_factory=dict)
    strategies: dict[str, str] = field(default_factory=dict)
    liveness_lost: bool = False
    max_tx_latency_rounds: int = 0
    overdue_txs: int = 0
    max_byzantine_seats: int = 0
    insecure_epochs: int = 0
    rounds: int = 0
    epochs: int = 0
    nic: bool = False
    replica_digests: dict[str, str] = field(default_factory=dict)

    @property
    def replicas_consistent(self) -> bool:
        return len(set(self.replica_digests.values())) <= 1

    @property
    def safe(self) -> bool:
        return self.safety_violations == 0 and self.invalid_blocks_committed == 0 and self.replicas_consistent

    def row(self) -> list[str]:
        avg_msgs = sum(self.messages_per_round) / len(self.messages_per_round) if self.messages_per_round else 0.0
        values = {
            "seed": self.seed,
            "n_csl": self.n_csl,
            "rounds": self.rounds,
            "epochs": self.epochs,
            "committed_pow_blocks": self.committed_pow_blocks,
            "committed_tx_blocks": self.committed_tx_blocks,
            "committed_com_blocks": self.committed_com_blocks,
            "committed_txs": self.committed_txs,
            "submitted_txs": self.submitted_txs,
            "invalid_blocks_committed": self.invalid_blocks_committed,
            "safety_violations": self.safety_violations,
            "view_changes": self.view_changes,
            "resets": self.resets,
            "liveness_lost": int(self.liveness_lost),
            "max_tx_latency_rounds": self.max_tx_latency_rounds,
            "overdue_txs": self.overdue_txs,
            "avg_messages_per_round": f"{avg_msgs:.6f}",
            "avg_tx_block_time": f"{self.avg_tx_block_time:.6f}",
            "tps": f"{self.tps:.6f}",
            "duration": f"{self.duration:.6f}",
            "max_byzantine_seats": self.max_byzantine_seats,
            "nic": int(self.nic),
            "replicas_consistent": int(self.replicas_consistent),
        }
        return [str(values[c]) for c in METRICS_COLUMNS]


def write_metrics_csv(metrics: Sequence[SessionMetrics], out: io.TextIOBase) -> None:
    out.write(f"# {METRICS_VERSION}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in metrics:
        w.writerow(m.row())


@dataclass
class SessionResult:
    metrics: SessionMetrics
    trace: Trace
    genesis: SharedState
    state: SharedState  # a correct replica at the end of the run


@dataclass
class _Pending:
    tx: Transaction
    submit_round: int


class _Session:
    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        n = cfg.n_csl
        tag = f"ashwa:{cfg.seed}"
        setup = random.Random(f"{tag}:setup")
        self.net_rng = random.Random(f"{tag}:net")
        self.tx_rng = random.Random(f"{tag}:tx")
        self.trace = Trace()
        self.metrics = SessionMetrics(seed=cfg.seed, n_csl=n)

        self.keys = [KeyPair.from_seed(f"{tag}:agent:{i}") for i in range(n)]
        self.types = cfg.agent_types()
        self.agent_of = {k.identity: i for i, k in enumerate(self.keys)}
        self.profiles = self._profiles()
        self.correct = [i for i, t in enumerate(self.types) if t is not AgentType.BYZANTINE]

        order = list(range(n))
        setup.shuffle(order)
        committee = tuple(self.keys[i].identity for i in order)
        self.users = [KeyPair.from_seed(f"{tag}:user:{j}") for j in range(cfg.n_accounts)]
        balances = {u.identity: cfg.account_balance for u in self.users}
        self.byz_account = KeyPair.from_seed(f"{tag}:byzantine-account")
        if cfg.byzantine_mode == "equivocate" and cfg.n_byzantine:
            balances[self.byz_account.identity] = 1000
        self.genesis = genesis_state(
            committee, balances, cfg.block_reward, KeyPair.from_seed(f"{tag}:genesis").identity
        )
        self.replicas = [self.genesis.clone() for _ in range(n)]
        for b in self.genesis.pow_chain:
            self.trace.record(0.0, "genesis_pow", b.p.display, b.hash)
        self._record_committee(0.0, self.genesis.com_chain[0])
        self._count_byzantine(committee)

        miners = [Miner(self.keys[i].identity, a) for i, a in enumerate(cfg.agent_alphas())]
        self.acl = AccessControlLayer(
            miners, cfg.acl, self.genesis.pow_chain, random.Random(f"{tag}:acl"), on_event=self._acl_event
        )
        self.proposed_at: dict[bytes, float] = {}

        window = consensus_round_time(n, cfg.latency, cfg.calibration)
        self.bft = cfg.bft.resolved(window)
        self.stall_limit = cfg.stall_limit or 2 * n + 2

        self.t = 0.0
        self.view_offset = 0
        self.forged = 0
        self.tx_time = 0.0
        self.halted = False
        self.rewards_seen = 0
        self._decisions: dict[tuple[int, bytes, int], bool] = {}

        self.memo = bytes(padded_memo_length(cfg.tx_bytes))
        self.nonces = [0] * cfg.n_accounts
        self.mempool: OrderedDict[bytes, _Pending] = OrderedDict()
        probe = make_transaction(self.users[0], self.users[1].identity, 100, 1, 0, self.memo)
        self.capacity = max(1, (cfg.block_bytes - 64) // (probe.byte_size + 8))
        if cfg.tx_rate is not None:
            self.rate = cfg.tx_rate
        else:
            per_round = max(cfg.acl.expected_block_interval, (cfg.tx_blocks_per_round + 1) * self.bft.latency_window)
            self.rate = cfg.tx_fill * cfg.tx_blocks_per_round * self.capacity / per_round
        if cfg.tx_blocks_per_round > 0:
            for _ in range(self.capacity):
                self._submit()
            self.next_arrival = self.tx_rng.expovariate(self.rate)
        else:
            self.next_arrival = math.inf

    # -- setup helpers

    def _profiles(self) -> list[AgentProfile]:
        cfg = self.cfg
        alphas, kappas = cfg.agent_alphas(), cfg.agent_kappas()
        belief = BeliefModel(cfg.adversary_alpha(), cfg.rho_s1, cfg.n_csl)
        out = []
        for i, t in enumerate(self.types):
            ident = self.keys[i].identity
            if t is AgentType.HONEST:
                s = Strategy.S2
            elif t is AgentType.BYZANTINE:
                s = Strategy.S3
            else:
                probe = AgentProfile(ident, t, Strategy.S2, kappas[i], alphas[i])
                s = best_response(probe, cfg.game, belief)
            out.append(AgentProfile(ident, t, s, kappas[i], alphas[i]))
        return out

    def _acl_event(self, time: float, kind: str, actor: str, payload: bytes) -> None:
        self.trace.record(time, kind, actor, payload)

    def _record_committee(self, time: float, com: ComBlock) -> None:
        for m in com.members:
            self.trace.record(time, "seat", m.display, com.hash)

    def _count_byzantine(self, committee: Sequence[Identity]) -> None:
        byz = sum(1 for m in committee if self.types[self.agent_of[m]] is AgentType.BYZANTINE)
        self.metrics.max_byzantine_seats = max(self.metrics.max_byzantine_seats, byz)
        if byz >= fault_threshold(len(committee)):
            self.metrics.insecure_epochs += 1

    @property
    def reference(self) -> SharedState:
        return self.replicas[self.correct[0] if self.correct else 0]

    # -- workload

    def _submit(self) -> None:
        cfg = self.cfg
        j = self.tx_rng.randrange(cfg.n_accounts)
        r = (j + 1 + self.tx_rng.randrange(cfg.n_accounts - 1)) % cfg.n_accounts
        coins = self.tx_rng.randint(1, 100)
        tx = make_transaction(self.users[j], self.users[r].identity, coins, 1, self.nonces[j], self.memo)
        self.nonces[j] += 1
        self.mempool[tx.hash] = _Pending(tx, self.metrics.rounds)
        self.metrics.submitted_txs += 1

    def _arrivals(self) -> None:
        while self.next_arrival <= self.t:
            self._submit()
            self.next_arrival += self.tx_rng.expovariate(self.rate)

    def _fill_block(self, proposer: Identity) -> TxBlock | None:
        budget = self.cfg.block_bytes - len(encode_fields(b"txb", proposer.pubkey, self.capacity + 1))
        txs = []
        for pending in self.mempool.values():
            size = pending.tx.byte_size + 4
            if size > budget:
                break
            budget -= size
            txs.append(pending.tx)
        if not txs:
            return None
        block = TxBlock(tuple(txs), proposer)
        assert block.byte_size <= self.cfg.block_bytes
        return block

    # -- proposals

    def _next_pow(self, ref: SharedState) -> PowBlock:
        while True:
            while not self.acl.inbox:
                block = self.acl.mine()
                for b in self.acl.propose_finalized(block.timestamp):
                    self.proposed_at[b.hash] = block.timestamp
            head = self.acl.inbox[0]
            if head.h == ref.tip.hash and head.height == ref.tip.height + 1:
                self.t = max(self.t, self.proposed_at[head.hash])
                return head
            self.acl.inbox.popleft()
            self.trace.record(self.t, "stale_proposal", head.p.display, head.hash)

    def _honest_op(self, kind: OpKind, primary: Identity, ref: SharedState) -> Operation | None:
        if kind is OpKind.TX_BLOCK:
            block = self._fill_block(primary)
            return Operation(kind, block) if block is not None else None
        if kind is OpKind.POW_BLOCK:
            return Operation(kind, self._next_pow(ref))
        return Operation(kind, next_com_block(ref))

    def _invalid_op(self, kind: OpKind, primary: Identity, ref: SharedState) -> Operation:
        self.forged += 1
        if kind is OpKind.TX_BLOCK:
            forged = Transaction(self.users[0].identity, primary, 1, 0, bytes(32), self.forged)
            return Operation(kind, TxBlock((forged,), primary))
        if kind is OpKind.POW_BLOCK:
            tip = ref.tip
            return Operation(kind, PowBlock(ZERO_DIGEST, tip.d, self.forged, primary, tip.height + 1))
        members = tuple(primary for _ in range(ref.n_csl))
        if members == latest_identities(ref):
            return Operation(kind, ComBlock(members, len(ref.com_chain) + self.forged))
        return Operation(kind, ComBlock(members, len(ref.com_chain)))

    def _equivocation(self, primary: Identity, seat: int, ref: SharedState):
        """Two conflicting spends of the adversary's account, one per half of the correct seats."""
        amount = ref.balances.get(self.byz_account.identity, 0)
        if amount <= 0:
            return None
        self.forged += 1
        k = 2 * self.forged
        to_a, to_b = self.users[0].identity, self.users[1].identity
        op_a = Operation(OpKind.TX_BLOCK, TxBlock((make_transaction(self.byz_account, to_a, amount, 0, k),), primary))
        op_b = Operation(OpKind.TX_BLOCK, TxBlock((make_transaction(self.byz_account, to_b, amount, 0, k + 1),), primary))
        committee = ref.committee
        byz = [s for s in range(len(committee)) if s != seat and self._is_byz_seat(committee, s)]
        honest = [s for s in range(len(committee)) if s != seat and not self._is_byz_seat(committee, s)]
        half_a, half_b = honest[0::2], honest[1::2]
        plan: dict[int, list[Operation]] = {s: [op_a] for s in half_a}
        plan.update({s: [op_b] for s in half_b})
        plan.update({s: [op_a, op_b] for s in byz})
        route_a, route_b = half_a + byz, half_b + byz
        routes = {op_a.digest: route_a, op_b.digest: route_b}
        return plan, routes

    def _is_byz_seat(self, committee: Sequence[Identity], s: int) -> bool:
        return self.types[self.agent_of[committee[s]]] is AgentType.BYZANTINE

    def _signs(self, agent: int, op: Operation) -> bool:
        replica = self.replicas[agent]
        key = (agent, op.digest, len(replica.op_log))
        if key not in self._decisions:
            self._decisions[key] = act_on_proposal(self.profiles[agent], op, replica).signs
        return self._decisions[key]

    def _seats(self, committee: Sequence[Identity], routes: Mapping[bytes, Sequence[int]] | None) -> list[Seat]:
        seats = []
        for s, member in enumerate(committee):
            a = self.agent_of[member]
            byz = self.types[a] is AgentType.BYZANTINE
            if byz and routes is not None:
                seats.append(
                    Seat(s, self.keys[a], correct=False, will_sign=lambda op: True,
                         vote_route=lambda op, r=routes: r[op.digest], colluding=True)
                )
            else:
                seats.append(Seat(s, self.keys[a], correct=not byz, will_sign=lambda op, a=a: self._signs(a, op)))
        return seats

    # -- slots

    def slot(self, kind: OpKind) -> bool:
        """Agree on one operation of ``kind``. False means the session must stop."""
        attempts = 0
        while True:
            ref = self.reference
            seat = primary_seat(ref, self.view_offset)
            primary = ref.committee[seat]
            agent = self.agent_of[primary]
            routes = None
            if self.types[agent] is AgentType.BYZANTINE:
                mode = self.cfg.byzantine_mode
                plan = None
                if mode == "equivocate" and kind is OpKind.TX_BLOCK:
                    eq = self._equivocation(primary, seat, ref)
                    if eq is not None:
                        plan, routes = eq
                if plan is None:
                    if mode == "silent":
                        plan = {}
                    else:
                        bad = self._invalid_op(kind, primary, ref)
                        plan = {s: [bad] for s in range(len(ref.committee)) if s != seat}
            else:
                op = self._honest_op(kind, primary, ref)
                if op is None:
                    return True
                plan = {s: [op] for s in range(len(ref.committee)) if s != seat}

            template = AgreementRound(None, primary, self.view_offset, ref.committee, 0.0)
            start = self.t
            res = run_agreement(
                template, self._seats(ref.committee, routes), plan, self.bft, self.net_rng, start, self.trace, seat
            )
            self.metrics.messages_per_round.append(res.messages)
            self.t = res.end
            if kind is OpKind.TX_BLOCK:
                self.tx_time += res.end - start
            if res.outcome is Outcome.COMMITTED:
                return self._apply(kind, res, seat)
            if res.outcome is Outcome.VIEW_CHANGED:
                self.metrics.view_changes += 1
                self.trace.record(self.t, "view_change", primary.display, str(self.view_offset + 1))
            else:
                self.metrics.resets += 1
                self.trace.record(self.t, "reset", primary.display, str(self.view_offset))
            self.view_offset += 1
            attempts += 1
            if attempts >= self.stall_limit:
                self.metrics.liveness_lost = True
                self.trace.record(self.t, "liveness_lost", "-", kind.value)
                return False

    def _commit_to(self, state: SharedState, op: Operation, proposer: Identity) -> None:
        try:
            if op.kind is OpKind.POW_BLOCK:
                commit_pow_block(state, op)
            elif op.kind is OpKind.TX_BLOCK:
                commit_tx_block(state, op, proposer)
            else:
                commit_com_block(state, op)
        except ProtocolError as exc:
            state.violations.append(str(exc))
            self.trace.record(self.t, "violation", "-", str(exc).replace(" ", "_"))

    def _apply(self, kind: OpKind, res, seat: int) -> bool:
        ref = self.reference
        proposer = ref.committee[seat]
        if len(res.committed) > 1:
            # two certificates for one log index: replicas diverge
            self.metrics.safety_violations += 1
            self.metrics.invalid_blocks_committed += len(res.committed) - 1
            self.trace.record(self.t, "safety_violation", proposer.display, b"".join(sorted(res.committed))[:32])
            agent_op: dict[int, bytes] = {}
            for s, d in sorted(res.commits_by_seat.items()):
                agent_op.setdefault(self.agent_of[ref.committee[s]], d)
            fallback = sorted(res.committed)[0]
            for a, replica in enumerate(self.replicas):
                self._commit_to(replica, res.committed[agent_op.get(a, fallback)], proposer)
            return False

        op: Operation = res.operation
        valid = validate_operation(ref, op)
        for replica in self.replicas:
            self._commit_to(replica, op, proposer)
        if kind is OpKind.POW_BLOCK:
            block: PowBlock = op.payload  # type: ignore[assignment]
            self.metrics.committed_pow_blocks += 1
            self.metrics.rounds += 1
            self.view_offset = 0
            self.trace.record(self.t, "commit_pow", block.p.display, block.hash)
            if valid:
                if self.acl.inbox and self.acl.inbox[0] == block:
                    self.acl.inbox.popleft()
                self.acl.on_commit(block, self.t)
        elif kind is OpKind.TX_BLOCK:
            tb: TxBlock = op.payload  # type: ignore[assignment]
            self.metrics.committed_tx_blocks += 1
            self.trace.record(self.t, "commit_tx", proposer.display, tb.hash)
            for tx in tb.txs:
                pending = self.mempool.pop(tx.hash, None)
                if pending is not None:
                    self.metrics.committed_txs += 1
                    lag = self.metrics.rounds - pending.submit_round
                    self.metrics.max_tx_latency_rounds = max(self.metrics.max_tx_latency_rounds, lag)
        else:
            com: ComBlock = op.payload  # type: ignore[assignment]
            self.metrics.committed_com_blocks += 1
            self.metrics.epochs += 1
            self.trace.record(self.t, "commit_com", proposer.display, com.hash)
            self._record_committee(self.t, com)
            self._count_byzantine(com.members)
        if not valid:
            self.metrics.invalid_blocks_committed += 1
            self.trace.record(self.t, "violation", proposer.display, "invalid_commit")
            return False
        return True

    # -- driver

    def run(self) -> SessionResult:
        cfg = self.cfg
        ok = True
        while ok and self.metrics.rounds < cfg.duration_rounds:
            for _ in range(cfg.tx_blocks_per_round):
                self._arrivals()
                ok = self.slot(OpKind.TX_BLOCK)
                if not ok:
                    break
            if not ok:
                break
            self._arrivals()
            ok = self.slot(OpKind.POW_BLOCK)
            if ok and self.reference.boundary_reached:
                ok = self.slot(OpKind.COM_BLOCK)
        self._finish()
        return SessionResult(self.metrics, self.trace, self.genesis, self.reference)

    def _finish(self) -> None:
        m, cfg = self.metrics, self.cfg
        m.duration = self.t
        m.avg_tx_block_time = self.tx_time / m.committed_tx_blocks if m.committed_tx_blocks else 0.0
        m.tps = m.committed_txs / self.t if self.t > 0 else 0.0
        window = cfg.n_csl + cfg.liveness_slack
        m.overdue_txs = sum(1 for p in self.mempool.values() if m.rounds - p.submit_round > window)
        for a in self.correct:
            m.replica_digests[self.keys[a].identity.display] = state_digest(self.replicas[a])
        ref = self.reference
        game = CommitteeGame(
            cfg.game,
            n_honest=cfg.n_honest,
            n_byzantine=cfg.n_byzantine,
            kappas=[k for k, t in zip(cfg.agent_kappas(), self.types) if t is AgentType.RATIONAL],
            alpha_a=cfg.adversary_alpha(),
        )
        kappa_r = as_fraction(cfg.game.kappa_r)
        # with no rational seats the envelope is the single belief q = alpha_A
        m.nic = nic_check(cfg.game, cfg.n_byzantine, cfg.n_csl, game.delta_min()).nic and all(
            as_fraction(k) >= kappa_r for k, t in zip(cfg.agent_kappas(), self.types) if t is AgentType.RATIONAL
        )
        blocks = max(1, m.committed_tx_blocks)
        invalid_rate = m.invalid_blocks_committed / blocks
        share = float(cfg.game.mining_share)
        vcost = float(cfg.game.validation_cost)
        for a, profile in enumerate(self.profiles):
            name = self.keys[a].identity.display
            m.strategies[name] = profile.strategy.value
            if self.types[a] is AgentType.BYZANTINE:
                continue
            earned = ref.balances.get(profile.id, 0) / blocks
            validates = profile.strategy is Strategy.S2
            m.per_agent_realized_utility[name] = (
                earned - share - (vcost if validates else 0.0) - float(profile.kappa) * invalid_rate
            )


def run_session(config: SessionConfig) -> SessionResult:
    """Run one session. Deterministic in ``config``: same seed, same trace bytes."""
    return _Session(config).run()


def check_rotation(trace_text: str, n_csl: int) -> list[str]:
    """Cross-check every committee announced in the trace against the committed PoW identities."""
    problems: list[str] = []
    chain: list[str] = []
    events = parse_trace(trace_text)
    i = 0
    while i < len(events):
        _, kind, actor, payload = events[i]
        if kind in ("genesis_pow", "commit_pow"):
            chain.append(actor)
        if kind == "commit_com":
            seats = []
            j = i + 1
            while j < len(events) and events[j][1] == "seat" and events[j][3] == payload:
                seats.append(events[j][2])
                j += 1
            if seats != chain[-n_csl:]:
                problems.append(f"committee {payload[:12]} != latest {n_csl} PoW identities")
            i = j
            continue
        i += 1
    return problems
