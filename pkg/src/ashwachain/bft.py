"""Byzantine agreement engine: one primary broadcast, one vote round, a threshold.

Each seat keeps its own :class:`AgreementRound`. Proposals and votes are
point-to-point messages with sampled delays; anything arriving after the
latency window is lost. At the deadline every correct seat holding an
operation with a supermajority of matching votes commits it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Sequence

from .chain_core import Identity, KeyPair, encode_fields, verify_signature
from .events import EventQueue, Trace


def supermajority_threshold(n_csl: int) -> int:
    """floor(2n/3) + 1 signatures."""
    if n_csl < 1:
        raise ValueError("committee size must be >= 1")
    return (2 * n_csl) // 3 + 1


def fault_threshold(n_csl: int) -> int:
    """ceil((n + 2) / 3): adversary seats that suffice to compromise agreement."""
    if n_csl < 1:
        raise ValueError("committee size must be >= 1")
    return -(-(n_csl + 2) // 3)


@dataclass(frozen=True)
class Endorsement:
    seat: int
    signer: Identity
    signature: bytes


def endorsement_payload(op_digest: bytes, seat: int) -> bytes:
    return encode_fields(b"endorse", op_digest, seat)


def endorse(keys: KeyPair, op_digest: bytes, seat: int) -> Endorsement:
    return Endorsement(seat, keys.identity, keys.sign(endorsement_payload(op_digest, seat)))


@dataclass(frozen=True)
class BftConfig:
    latency_window: float | None = None
    view_change_timeout: float | None = None
    delay_low: float = 0.0
    delay_high: float | None = None

    def resolved(self, default_window: float) -> BftConfig:
        """Fill unset fields: window from the latency model, timeout 2x window, delays up to window/4."""
        window = self.latency_window if self.latency_window is not None else default_window
        timeout = self.view_change_timeout if self.view_change_timeout is not None else 2 * window
        high = self.delay_high if self.delay_high is not None else window / 4
        cfg = BftConfig(window, timeout, self.delay_low, high)
        if window <= 0 or timeout <= 0 or high <= 0 or self.delay_low < 0 or high < self.delay_low:
            raise ValueError(f"invalid BFT timing: {cfg}")
        return cfg

    def sample_delay(self, rng: random.Random) -> float:
        assert self.delay_high is not None
        return rng.uniform(self.delay_low, self.delay_high)


@dataclass(frozen=True)
class Vote:
    seat: int
    voter: Identity
    view: int
    op_digest: bytes
    signature: bytes

    def endorsement(self) -> Endorsement:
        return Endorsement(self.seat, self.voter, self.signature)


@dataclass(frozen=True)
class Proposal:
    seat: int
    primary: Identity
    view: int
    operation: Any
    signature: bytes

    def as_vote(self) -> Vote:
        return Vote(self.seat, self.primary, self.view, self.operation.digest, self.signature)


def make_vote(keys: KeyPair, seat: int, view: int, op_digest: bytes) -> Vote:
    return Vote(seat, keys.identity, view, op_digest, endorse(keys, op_digest, seat).signature)


@dataclass
class AgreementRound:
    """One seat's view of an agreement instance."""

    operation: Any
    primary: Identity
    view: int
    committee: tuple[Identity, ...]
    deadline: float
    collected: dict[int, Vote] = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    equivocation: bool = False

    def matching(self, op_digest: bytes) -> list[Vote]:
        return [v for _, v in sorted(self.collected.items()) if v.op_digest == op_digest]


def collect_votes(round_: AgreementRound, messages: Iterable[Vote]) -> AgreementRound:
    """Admit votes that are from a member seat, correctly signed and first for that seat in this view."""
    for vote in messages:
        if vote.view != round_.view:
            round_.violations.append(f"stale view {vote.view} from seat {vote.seat}")
            continue
        if not 0 <= vote.seat < len(round_.committee) or round_.committee[vote.seat] != vote.voter:
            round_.violations.append(f"non-member vote from {vote.voter.display} as seat {vote.seat}")
            continue
        if not verify_signature(vote.voter, endorsement_payload(vote.op_digest, vote.seat), vote.signature):
            round_.violations.append(f"bad signature from seat {vote.seat}")
            continue
        if vote.seat in round_.collected:
            if round_.collected[vote.seat] != vote:
                round_.violations.append(f"duplicate vote from seat {vote.seat}")
            continue
        round_.collected[vote.seat] = vote
    return round_


class Outcome(Enum):
    COMMITTED = "committed"
    RESET = "reset"
    VIEW_CHANGED = "view_changed"


@dataclass
class Seat:
    """A committee seat as seen by the engine.

    ``will_sign`` is the seat's voting policy. ``vote_route`` picks the
    recipients of a vote (default: every other seat). Colluding seats vote on
    every operation they are handed and never report equivocation.
    """

    index: int
    keys: KeyPair
    correct: bool = True
    will_sign: Callable[[Any], bool] = lambda op: True
    vote_route: Callable[[Any], Iterable[int]] | None = None
    colluding: bool = False

    @property
    def identity(self) -> Identity:
        return self.keys.identity


@dataclass
class AgreementResult:
    outcome: Outcome
    view: int
    primary_seat: int
    start: float
    end: float
    committed: dict[bytes, Any]
    commits_by_seat: dict[int, bytes]
    messages_sent: int
    messages_modeled: int
    violations: list[str]
    equivocation_detected: bool

    @property
    def messages(self) -> int:
        return self.messages_sent + self.messages_modeled

    @property
    def operation(self) -> Any:
        """The committed operation when exactly one was committed."""
        if len(self.committed) != 1:
            return None
        return next(iter(self.committed.values()))


def run_agreement(
    template: AgreementRound,
    seats: Sequence[Seat],
    plan: Mapping[int, Sequence[Any]],
    config: BftConfig,
    rng: random.Random,
    start: float,
    trace: Trace | None = None,
    primary_seat: int | None = None,
) -> AgreementResult:
    """Simulate one agreement instance.

    ``plan`` is what the primary sends: seat index -> operations handed to
    that seat. An honest primary hands every seat the same single
    operation; an empty plan is a silent primary. ``primary_seat`` picks
    the seat when the primary's identity holds several seats.
    """
    n = len(seats)
    committee = template.committee
    if len(committee) != n or any(s.identity != committee[s.index] for s in seats):
        raise ValueError("seats do not match the committee")
    if primary_seat is None:
        primary_seat = next((i for i, m in enumerate(committee) if m == template.primary), None)
    if primary_seat is None or committee[primary_seat] != template.primary:
        raise ValueError("primary is not a committee member")
    threshold = supermajority_threshold(n)
    deadline = start + config.latency_window  # type: ignore[operator]
    view = template.view
    primary = seats[primary_seat]

    rounds = [
        AgreementRound(None, template.primary, view, committee, deadline) for _ in range(n)
    ]
    held: list[dict[bytes, Any]] = [{} for _ in range(n)]
    queue = EventQueue()
    sent = 0

    def log(time: float, kind: str, actor: Identity, payload: bytes) -> None:
        if trace is not None:
            trace.record(time, kind, actor.display, payload)

    def send(time: float, src: int, dst: int, msg: Proposal | Vote) -> None:
        nonlocal sent
        sent += 1
        kind = "msg_proposal" if isinstance(msg, Proposal) else "msg_vote"
        digest = msg.operation.digest if isinstance(msg, Proposal) else msg.op_digest
        log(time, kind, seats[src].identity, digest)
        queue.push(time + config.sample_delay(rng), (dst, msg))

    def hold(i: int, op: Any, time: float) -> None:
        seat = seats[i]
        d = op.digest
        if d in held[i]:
            return
        if held[i] and not seat.colluding:
            rounds[i].equivocation = True
            if seat.correct:
                log(time, "equivocation", seat.identity, d)
            return
        held[i][d] = op
        if rounds[i].operation is None:
            rounds[i].operation = op
        if i == primary_seat or not seat.will_sign(op):
            return
        vote = make_vote(seat.keys, i, view, d)
        collect_votes(rounds[i], [vote])
        targets = seat.vote_route(op) if seat.vote_route is not None else range(n)
        for j in targets:
            if j != i:
                send(time, i, j, vote)

    # primary broadcast: its proposal doubles as its own vote
    primary_ops: dict[bytes, Any] = {}
    for i in sorted(plan):
        for op in plan[i]:
            primary_ops.setdefault(op.digest, op)
    for d, op in primary_ops.items():
        held[primary_seat][d] = op
        if rounds[primary_seat].operation is None:
            rounds[primary_seat].operation = op
        collect_votes(rounds[primary_seat], [make_vote(primary.keys, primary_seat, view, d)])
    for i in sorted(plan):
        if i == primary_seat:
            continue
        for op in plan[i]:
            vote = make_vote(primary.keys, primary_seat, view, op.digest)
            send(start, primary_seat, i, Proposal(primary_seat, primary.identity, view, op, vote.signature))

    while queue and queue.peek_time() <= deadline:  # type: ignore[operator]
        time, (dst, msg) = queue.pop()
        if isinstance(msg, Proposal):
            if msg.view != view or msg.seat != primary_seat or msg.primary != primary.identity:
                rounds[dst].violations.append(f"proposal from non-primary seat {msg.seat}")
                continue
            if not verify_signature(msg.primary, endorsement_payload(msg.operation.digest, msg.seat), msg.signature):
                rounds[dst].violations.append("bad primary signature")
                continue
            collect_votes(rounds[dst], [msg.as_vote()])
            hold(dst, msg.operation, time)
        else:
            collect_votes(rounds[dst], [msg])

    committed: dict[bytes, Any] = {}
    commits_by_seat: dict[int, bytes] = {}
    for i, seat in enumerate(seats):
        r = rounds[i]
        if not seat.correct or r.equivocation or r.operation is None:
            continue
        d = r.operation.digest
        votes = r.matching(d)
        if len(votes) >= threshold:
            commits_by_seat[i] = d
            if d not in committed:
                committed[d] = r.operation.with_signatures(v.endorsement() for v in votes)

    violations = [v for i, r in enumerate(rounds) if seats[i].correct for v in r.violations]
    if trace is not None:
        for i, r in enumerate(rounds):
            if seats[i].correct:
                for v in r.violations:
                    trace.record(deadline, "violation", seats[i].identity.display, v.replace(" ", "_"))
    equivocation = any(r.equivocation for i, r in enumerate(rounds) if seats[i].correct)
    reached_correct = any(held[i] for i, s in enumerate(seats) if s.correct and i != primary_seat)

    if committed:
        outcome = Outcome.COMMITTED
        end = deadline
    elif equivocation or not reached_correct:
        outcome = Outcome.VIEW_CHANGED
        end = start + config.view_change_timeout  # type: ignore[operator]
    else:
        outcome = Outcome.RESET
        end = deadline
    modeled = n * (n - 1) if outcome is Outcome.COMMITTED else 0
    return AgreementResult(
        outcome=outcome,
        view=view,
        primary_seat=primary_seat,
        start=start,
        end=end,
        committed=committed,
        commits_by_seat=commits_by_seat,
        messages_sent=sent,
        messages_modeled=modeled,
        violations=violations,
        equivocation_detected=equivocation,
    )
