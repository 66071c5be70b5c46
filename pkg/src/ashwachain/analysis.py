"""Committee sizing and the incentive-compatibility checker.

Binomial tails are computed exactly with integer arithmetic up to
``EXACT_LIMIT`` trials. Beyond that the sum is done in log space, where
lgamma keeps roughly 1e-13 relative accuracy for the tail sizes that matter.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

from .agents import GameParams, Number, as_fraction
from .bft import fault_threshold

EXACT_LIMIT = 200
MIN_COMMITTEE = 4
CSV_VERSION = "ashwachain-committee-size/1"
CSV_COLUMNS = ("alpha_A", "epsilon", "n_csl_min", "compromise_prob_at_min")
NOT_FOUND = "NotFound"

DEFAULT_ALPHAS = tuple(round(0.01 * i, 2) for i in range(1, 19))
DEFAULT_EPSILONS = (2e-4, 2e-5, 2e-6)


def _check_domain(n: int, p: Number, k: int) -> None:
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if not 0 <= k <= n + 1:
        raise ValueError(f"k must be in [0, n+1], got {k}")
    if not 0 <= float(p) <= 1:
        raise ValueError(f"p must be in [0, 1], got {p}")


def binomial_tail_exact(n: int, p: Number, k: int) -> Fraction:
    """P(X >= k) for X ~ Bin(n, p) as an exact rational."""
    _check_domain(n, p, k)
    p = as_fraction(p)
    a, b = p.numerator, p.denominator
    num = sum(math.comb(n, i) * a**i * (b - a) ** (n - i) for i in range(k, n + 1))
    return Fraction(num, b**n)


def _log_pmf(n: int, i: int, logp: float, logq: float) -> float:
    return math.lgamma(n + 1) - math.lgamma(i + 1) - math.lgamma(n - i + 1) + i * logp + (n - i) * logq


def binomial_tail(n: int, p: Number, k: int) -> float:
    """P(X >= k) for X ~ Bin(n, p)."""
    _check_domain(n, p, k)
    if k == 0:
        return 1.0
    if k > n:
        return 0.0
    pf = float(p)
    if pf == 0.0:
        return 0.0
    if pf == 1.0:
        return 1.0
    if n <= EXACT_LIMIT:
        return float(binomial_tail_exact(n, p, k))
    logp, logq = math.log(pf), math.log1p(-pf)
    terms = [_log_pmf(n, i, logp, logq) for i in range(k, n + 1)]
    top = max(terms)
    return min(1.0, math.exp(top) * math.fsum(math.exp(t - top) for t in terms))


def compromise_probability(n_csl: int, alpha_a: Number) -> float:
    """Chance that Bin(n_csl, alpha_a) adversary seats reach the fault threshold."""
    if n_csl < MIN_COMMITTEE:
        raise ValueError(f"committee size must be >= {MIN_COMMITTEE}")
    return binomial_tail(n_csl, alpha_a, fault_threshold(n_csl))


def compromise_probability_exact(n_csl: int, alpha_a: Number) -> Fraction:
    if n_csl < MIN_COMMITTEE:
        raise ValueError(f"committee size must be >= {MIN_COMMITTEE}")
    return binomial_tail_exact(n_csl, alpha_a, fault_threshold(n_csl))


@dataclass(frozen=True)
class SecurityQuery:
    epsilon: float
    alpha_a: float
    max_n: int = 1000

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")
        if not 0 <= self.alpha_a < 1:
            raise ValueError("alpha_a must be in [0, 1)")
        if self.max_n < MIN_COMMITTEE:
            raise ValueError(f"max_n must be >= {MIN_COMMITTEE}")


def _within(n: int, alpha_a: float, epsilon: float) -> bool:
    if n <= EXACT_LIMIT:
        return compromise_probability_exact(n, alpha_a) <= as_fraction(epsilon)
    return compromise_probability(n, alpha_a) <= epsilon


def min_committee_size(q: SecurityQuery) -> int | None:
    """Smallest n in [4, max_n] whose compromise probability is <= epsilon, or None.

    Every n is checked: the fault threshold grows in steps of one every
    three seats, so the tail is not monotone in n.
    """
    for n in range(MIN_COMMITTEE, q.max_n + 1):
        if _within(n, q.alpha_a, q.epsilon):
            return n
    return None


@dataclass(frozen=True)
class CommitteeSizeRow:
    alpha_a: float
    epsilon: float
    n_csl_min: int | None
    compromise_prob: float | None
    max_n: int

    def cells(self) -> list[str]:
        if self.n_csl_min is None:
            return [repr(self.alpha_a), repr(self.epsilon), NOT_FOUND, f"cap={self.max_n}"]
        return [repr(self.alpha_a), repr(self.epsilon), str(self.n_csl_min), f"{self.compromise_prob:.12e}"]


def _row(args: tuple[float, float, int]) -> CommitteeSizeRow:
    alpha, eps, max_n = args
    n = min_committee_size(SecurityQuery(eps, alpha, max_n))
    prob = compromise_probability(n, alpha) if n is not None else None
    return CommitteeSizeRow(alpha, eps, n, prob, max_n)


def committee_size_table(
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    epsilons: Sequence[float] = DEFAULT_EPSILONS,
    max_n: int = 1000,
    parallel: int = 1,
) -> list[CommitteeSizeRow]:
    """One row per (alpha, epsilon), sorted by key whatever the worker count."""
    if not alphas or not epsilons:
        raise ValueError("grids must be nonempty")
    jobs = [(float(a), float(e), max_n) for a in alphas for e in epsilons]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_row, jobs))
    else:
        rows = [_row(j) for j in jobs]
    return sorted(rows, key=lambda r: (r.alpha_a, -r.epsilon))


def write_committee_size_csv(rows: Iterable[CommitteeSizeRow], out: io.TextIOBase) -> None:
    out.write(f"# {CSV_VERSION}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.cells())


@dataclass(frozen=True)
class Condition:
    holds: bool
    margin: Fraction


@dataclass(frozen=True)
class NicReport:
    faithful_fault_tolerance: Condition  # margin n_f - n_B
    maximum_payload: Condition  # slack kappa_R * delta_min - phi * c_val
    minimum_reward: Condition  # slack TR - phi * c_val - c_mine / n_TX
    degenerate: bool = False  # c_val == 0 with phi > 0

    @property
    def nic(self) -> bool:
        return self.faithful_fault_tolerance.holds and self.maximum_payload.holds and self.minimum_reward.holds

    def lines(self) -> list[str]:
        out = []
        for name in ("faithful_fault_tolerance", "maximum_payload", "minimum_reward"):
            c: Condition = getattr(self, name)
            out.append(f"{name} {'pass' if c.holds else 'fail'} margin={float(c.margin):.12g}")
        out.append(f"degenerate {str(self.degenerate).lower()}")
        out.append(f"nic {'pass' if self.nic else 'fail'}")
        return out


def nic_check(params: GameParams, n_b: int, n_csl: int, delta_min: Number) -> NicReport:
    if n_b < 0 or n_csl < 1:
        raise ValueError("invalid seat counts")
    nf = fault_threshold(n_csl)
    fft = Condition(n_b < nf, Fraction(nf - n_b))
    cost = params.validation_cost
    slack = as_fraction(params.kappa_r) * as_fraction(delta_min) - cost
    mp = Condition(slack >= 0, slack)
    reward = as_fraction(params.tr) - cost - params.mining_share
    mr = Condition(reward >= 0, reward)
    degenerate = as_fraction(params.c_val) == 0 and as_fraction(params.phi) > 0
    return NicReport(fft, mp, mr, degenerate)
