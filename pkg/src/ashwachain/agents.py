"""BAR agents: strategies, the utility model and best responses.

All probabilities and utilities are exact :class:`fractions.Fraction`
values so that equilibrium comparisons never depend on rounding. Floats
passed in are converted through their shortest decimal repr, so ``0.3``
means 3/10.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Iterable, Sequence, Union

from .bft import fault_threshold, supermajority_threshold
from .chain_core import Identity
from .csl import Operation, SharedState, validate_operation

Number = Union[int, float, Fraction, str]


def as_fraction(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise TypeError("booleans are not numbers here")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


class AgentType(Enum):
    HONEST = "honest"
    RATIONAL = "rational"
    BYZANTINE = "byzantine"


class Strategy(Enum):
    S1 = "s1"  # sign without validating
    S2 = "s2"  # validate then sign
    S3 = "s3"  # sign and propose only invalid blocks


class VoteDecision(Enum):
    SIGN_VALID = "sign_valid"
    SIGN_WITHOUT_CHECK = "sign_without_check"
    SIGN_INVALID_ONLY = "sign_invalid_only"
    REJECT = "reject"

    @property
    def signs(self) -> bool:
        return self is not VoteDecision.REJECT


@dataclass(frozen=True)
class AgentProfile:
    id: Identity
    agent_type: AgentType
    strategy: Strategy
    kappa: Number = 0
    alpha: float = 0.0
    reward: Number | None = None  # TR_i; None means the game's TR

    def __post_init__(self) -> None:
        t, s = self.agent_type, self.strategy
        if t is AgentType.HONEST and s is not Strategy.S2:
            raise ValueError("honest agents play s2")
        if t is AgentType.BYZANTINE and s is not Strategy.S3:
            raise ValueError("byzantine agents play s3")
        if t is AgentType.RATIONAL and s is Strategy.S3:
            raise ValueError("rational agents play s1 or s2")
        if as_fraction(self.kappa) < 0:
            raise ValueError("kappa must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")


@dataclass(frozen=True)
class GameParams:
    tr: Number
    c_mine: Number
    c_val: Number
    phi: Number
    n_tx: int = 1
    kappa_r: Number = 0

    def __post_init__(self) -> None:
        for name in ("tr", "c_mine", "c_val", "phi", "kappa_r"):
            if as_fraction(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_tx < 1:
            raise ValueError("n_tx must be >= 1")

    @property
    def validation_cost(self) -> Fraction:
        return as_fraction(self.phi) * as_fraction(self.c_val)

    @property
    def mining_share(self) -> Fraction:
        return as_fraction(self.c_mine) / self.n_tx


@dataclass(frozen=True)
class BeliefModel:
    alpha_a: Number
    rho_s1: Number
    committee_size: int

    def __post_init__(self) -> None:
        if not 0 <= as_fraction(self.alpha_a) <= 1:
            raise ValueError("alpha_a must be in [0, 1]")
        if not 0 <= as_fraction(self.rho_s1) <= 1:
            raise ValueError("rho_s1 must be in [0, 1]")
        if self.committee_size < 1:
            raise ValueError("committee_size must be >= 1")

    @property
    def q(self) -> Fraction:
        """Chance another seat signs an invalid block: adversarial, or rational on s1."""
        a = as_fraction(self.alpha_a)
        return a + (1 - a) * as_fraction(self.rho_s1)

    def default_threshold(self) -> int:
        return supermajority_threshold(self.committee_size)


@lru_cache(maxsize=65536)
def _upper_tail(m: int, q: Fraction, k: int) -> Fraction:
    """P(Bin(m, q) >= k), exact."""
    if k <= 0:
        return Fraction(1)
    if k > m:
        return Fraction(0)
    r = 1 - q
    return sum((comb(m, i) * q**i * r ** (m - i) for i in range(k, m + 1)), Fraction(0))


def p_invalid_q(committee_size: int, q: Fraction, own: Strategy, threshold: int) -> Fraction:
    if committee_size < 1:
        raise ValueError("committee_size must be >= 1")
    if own not in (Strategy.S1, Strategy.S2):
        raise ValueError("own strategy must be s1 or s2")
    need = threshold - 1 if own is Strategy.S1 else threshold
    return _upper_tail(committee_size - 1, as_fraction(q), need)


def p_invalid(belief: BeliefModel, own: Strategy, threshold: int | None = None) -> Fraction:
    """Chance an invalid block proposed by a Byzantine primary reaches ``threshold`` signatures.

    Every other seat signs it independently with probability ``belief.q``;
    the own seat adds its signature only when playing s1.
    """
    k = belief.default_threshold() if threshold is None else threshold
    return p_invalid_q(belief.committee_size, belief.q, own, k)


def pivotal_probability(m: int, k: int, q: Number) -> Fraction:
    """C(m, k-1) q^(k-1) (1-q)^(m-k+1): exactly k-1 of the m others sign."""
    q = as_fraction(q)
    if k < 1 or k - 1 > m:
        return Fraction(0)
    return comb(m, k - 1) * q ** (k - 1) * (1 - q) ** (m - k + 1)


def delta(belief: BeliefModel, threshold: int | None = None) -> Fraction:
    return p_invalid(belief, Strategy.S1, threshold) - p_invalid(belief, Strategy.S2, threshold)


def delta_min(committee_size: int, threshold: int, qs: Iterable[Number]) -> Fraction:
    """Smallest delta over an envelope of beliefs ``qs``."""
    m = committee_size - 1
    values = [pivotal_probability(m, threshold, q) for q in qs]
    if not values:
        raise ValueError("empty envelope")
    return min(values)


def strategy_utility(tr: Number, params: GameParams, p_inv: Number, kappa: Number, strategy: Strategy) -> Fraction:
    u = as_fraction(tr) - params.mining_share - as_fraction(p_inv) * as_fraction(kappa)
    if strategy is Strategy.S2:
        u -= params.validation_cost
    elif strategy is not Strategy.S1:
        raise ValueError("utility is defined for s1 and s2 only")
    return u


def utility(
    profile: AgentProfile,
    params: GameParams,
    belief: BeliefModel,
    strategy: Strategy,
    threshold: int | None = None,
) -> Fraction:
    """Expected utility per transaction block for playing ``strategy``."""
    tr = params.tr if profile.reward is None else profile.reward
    return strategy_utility(tr, params, p_invalid(belief, strategy, threshold), profile.kappa, strategy)


def best_response(
    profile: AgentProfile,
    params: GameParams,
    belief: BeliefModel,
    threshold: int | None = None,
) -> Strategy:
    if profile.agent_type is not AgentType.RATIONAL:
        raise ValueError("best response is defined for rational agents")
    u1 = utility(profile, params, belief, Strategy.S1, threshold)
    u2 = utility(profile, params, belief, Strategy.S2, threshold)
    return Strategy.S1 if u1 > u2 else Strategy.S2


def act_on_proposal(
    profile: AgentProfile,
    op: Operation,
    state_view: SharedState,
    valid: bool | None = None,
) -> VoteDecision:
    """How a seat votes on ``op``. ``valid`` may be passed in to skip re-validation."""
    if profile.strategy is Strategy.S1:
        return VoteDecision.SIGN_WITHOUT_CHECK
    ok = validate_operation(state_view, op) if valid is None else valid
    if profile.strategy is Strategy.S2:
        return VoteDecision.SIGN_VALID if ok else VoteDecision.REJECT
    return VoteDecision.REJECT if ok else VoteDecision.SIGN_INVALID_ONLY


@dataclass
class CommitteeGame:
    """The one-shot signing game among the rational seats of a committee.

    A rational seat's belief ``rho_s1`` is the fraction of the other correct
    seats (honest or rational) that play s1 in the profile under
    consideration; honest seats never do. The expected
    utilities use the binomial belief model; ``realized_utility`` instead
    counts the signatures an invalid block would actually collect.
    """

    params: GameParams
    n_honest: int
    n_byzantine: int
    kappas: Sequence[Number]
    alpha_a: Number
    rewards: Sequence[Number] | None = None

    def __post_init__(self) -> None:
        if self.n_honest < 0 or self.n_byzantine < 0:
            raise ValueError("negative seat counts")
        if self.committee_size < 1:
            raise ValueError("empty committee")
        self._kappa = [as_fraction(k) for k in self.kappas]
        if any(k < 0 for k in self._kappa):
            raise ValueError("kappa must be >= 0")
        tr = as_fraction(self.params.tr)
        self._tr = [as_fraction(r) for r in self.rewards] if self.rewards is not None else [tr] * self.n_rational
        if len(self._tr) != self.n_rational:
            raise ValueError("one reward per rational seat")
        self._gain_cache: dict[int, list[Fraction]] = {}

    @property
    def n_rational(self) -> int:
        return len(self.kappas)

    @property
    def committee_size(self) -> int:
        return self.n_honest + self.n_rational + self.n_byzantine

    @property
    def threshold(self) -> int:
        return supermajority_threshold(self.committee_size)

    def belief_q(self, others_on_s1: int) -> Fraction:
        """q when ``others_on_s1`` of the other correct (honest or rational) seats play s1."""
        a = as_fraction(self.alpha_a)
        peers = self.n_honest + self.n_rational - 1
        rho = Fraction(others_on_s1, peers) if peers > 0 else Fraction(0)
        return a + (1 - a) * rho

    def envelope(self) -> list[Fraction]:
        return [self.belief_q(j) for j in range(max(1, self.n_rational))]

    def delta_min(self) -> Fraction:
        return delta_min(self.committee_size, self.threshold, self.envelope())

    def _delta_at(self, j: int) -> Fraction:
        return pivotal_probability(self.committee_size - 1, self.threshold, self.belief_q(j))

    def expected_utility(self, seat: int, strategy: Strategy, others_on_s1: int) -> Fraction:
        p = p_invalid_q(self.committee_size, self.belief_q(others_on_s1), strategy, self.threshold)
        return strategy_utility(self._tr[seat], self.params, p, self._kappa[seat], strategy)

    def deviation_gains(self, seat: int) -> list[Fraction]:
        """u(s1) - u(s2) for ``seat`` as a function of how many others play s1."""
        if seat not in self._gain_cache:
            cost = self.params.validation_cost
            k = self._kappa[seat]
            self._gain_cache[seat] = [cost - k * self._delta_at(j) for j in range(max(1, self.n_rational))]
        return self._gain_cache[seat]

    def best_response(self, seat: int, profile: Sequence[Strategy]) -> Strategy:
        others = sum(1 for j, s in enumerate(profile) if j != seat and s is Strategy.S1)
        return Strategy.S1 if self.deviation_gains(seat)[others] > 0 else Strategy.S2

    def is_psne(self, profile: Sequence[Strategy]) -> bool:
        total = sum(1 for s in profile if s is Strategy.S1)
        for i, s in enumerate(profile):
            gain = self.deviation_gains(i)[total - (s is Strategy.S1)]
            if s is Strategy.S2 and gain > 0:
                return False
            if s is Strategy.S1 and gain < 0:
                return False
        return True

    def profiles(self) -> Iterable[tuple[Strategy, ...]]:
        return itertools.product((Strategy.S1, Strategy.S2), repeat=self.n_rational)

    def pure_equilibria(self) -> list[tuple[Strategy, ...]]:
        return [p for p in self.profiles() if self.is_psne(p)]

    def s1_responders(self) -> list[tuple[int, int]]:
        """(seat, others_on_s1) pairs for which s1 is a strict best response."""
        return [
            (i, j)
            for i in range(self.n_rational)
            for j, g in enumerate(self.deviation_gains(i))
            if g > 0
        ]

    def best_response_dynamics(self, start: Sequence[Strategy], max_steps: int = 1000) -> tuple[Strategy, ...]:
        """Round-robin best responses until nothing changes."""
        profile = list(start)
        for _ in range(max_steps):
            changed = False
            for i in range(self.n_rational):
                br = self.best_response(i, profile)
                if br is not profile[i]:
                    profile[i] = br
                    changed = True
            if not changed:
                return tuple(profile)
        raise RuntimeError("best-response dynamics did not settle")

    def realized_p_invalid(self, profile: Sequence[Strategy]) -> int:
        """1 if the Byzantine and s1 seats alone can certify an invalid block, else 0."""
        signers = self.n_byzantine + sum(1 for s in profile if s is Strategy.S1)
        return int(signers >= self.threshold)

    def realized_utility(self, seat: int, profile: Sequence[Strategy]) -> Fraction:
        return strategy_utility(
            self._tr[seat], self.params, self.realized_p_invalid(profile), self._kappa[seat], profile[seat]
        )

    def secure(self) -> bool:
        return self.n_byzantine < fault_threshold(self.committee_size)
