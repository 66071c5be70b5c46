from __future__ import annotations

import io
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ashwachain.agents import GameParams
from ashwachain.analysis import (
    CSV_COLUMNS,
    CSV_VERSION,
    EXACT_LIMIT,
    NOT_FOUND,
    SecurityQuery,
    binomial_tail,
    binomial_tail_exact,
    committee_size_table,
    compromise_probability,
    compromise_probability_exact,
    min_committee_size,
    nic_check,
    write_committee_size_csv,
)
from ashwachain.bft import fault_threshold


def dp_tail(n, p, k):
    """Independent oracle: build the Bin(n, p) pmf by repeated convolution."""
    p = Fraction(p)
    pmf = [Fraction(1)]
    for _ in range(n):
        nxt = [Fraction(0)] * (len(pmf) + 1)
        for i, v in enumerate(pmf):
            nxt[i] += v * (1 - p)
            nxt[i + 1] += v * p
        pmf = nxt
    return sum(pmf[k:], Fraction(0))


def test_worked_example():
    assert binomial_tail_exact(10, Fraction(1, 2), 4) == Fraction(848, 1024)
    assert binomial_tail(10, 0.5, 4) == 0.828125


def test_tail_edges():
    assert binomial_tail(7, 0.3, 0) == 1.0
    assert binomial_tail(7, 0.0, 1) == 0.0
    assert binomial_tail(7, 1.0, 7) == 1.0
    assert binomial_tail(7, 0.3, 8) == 0.0
    with pytest.raises(ValueError):
        binomial_tail(7, 0.3, 9)
    with pytest.raises(ValueError):
        binomial_tail(7, 1.3, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 30), st.fractions(0, 1, max_denominator=40), st.data())
def test_exact_tail_matches_convolution(n, p, data):
    k = data.draw(st.integers(0, n + 1))
    exact = dp_tail(n, p, k)
    assert binomial_tail_exact(n, p, k) == exact
    assert binomial_tail(n, p, k) == float(exact)  # correctly rounded


@pytest.mark.parametrize("n", [250, 400, 1000])
@pytest.mark.parametrize("p", [0.05, 0.15, 0.3])
def test_log_space_tail_against_exact(n, p):
    assert n > EXACT_LIMIT
    k = fault_threshold(n)
    exact = float(binomial_tail_exact(n, p, k))
    assert math.isclose(binomial_tail(n, p, k), exact, rel_tol=1e-12, abs_tol=1e-300)


@pytest.mark.parametrize("n,p", [(51, 0.15), (120, 0.1), (600, 0.2)])
def test_tail_agrees_with_scipy(n, p):
    k = fault_threshold(n)
    assert math.isclose(binomial_tail(n, p, k), stats.binom.sf(k - 1, n, p), rel_tol=1e-9)


def test_compromise_probability_edges():
    assert compromise_probability(51, 0) == 0
    assert compromise_probability(51, 1) == 1
    with pytest.raises(ValueError):
        compromise_probability(3, 0.1)


def test_compromise_probability_51_at_15_percent():
    exact = compromise_probability_exact(51, Fraction(15, 100))
    assert exact == dp_tail(51, Fraction(15, 100), 18)
    assert math.isclose(compromise_probability(51, 0.15), float(exact), rel_tol=1e-12)
    # the floor-rounded fault threshold gives the other candidate value
    assert float(dp_tail(51, Fraction(15, 100), 17)) > float(exact)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 120), st.fractions(0, 1, max_denominator=100), st.fractions(0, 1, max_denominator=100))
def test_compromise_nondecreasing_in_alpha(n, a, b):
    lo, hi = min(a, b), max(a, b)
    assert compromise_probability_exact(n, lo) <= compromise_probability_exact(n, hi)


def test_min_committee_size_zero_adversary():
    assert min_committee_size(SecurityQuery(1e-9, 0.0)) == 4


def test_min_committee_size_not_found_above_one_third():
    assert min_committee_size(SecurityQuery(1e-6, 0.34, 2000)) is None


@pytest.mark.parametrize("alpha,eps", [(0.15, 2e-4), (0.1, 2e-5), (0.05, 2e-6), (0.18, 2e-4)])
def test_min_committee_size_is_minimal(alpha, eps):
    n = min_committee_size(SecurityQuery(eps, alpha))
    eps_f = Fraction(repr(eps))
    assert dp_tail(n, Fraction(repr(alpha)), fault_threshold(n)) <= eps_f
    for m in range(4, n):
        assert dp_tail(m, Fraction(repr(alpha)), fault_threshold(m)) > eps_f


def test_tail_is_not_monotone_in_n():
    # adding a seat without raising the fault threshold makes compromise likelier
    vals = [compromise_probability(n, 0.15) for n in range(40, 46)]
    assert any(b > a for a, b in zip(vals, vals[1:]))


def test_query_validation():
    with pytest.raises(ValueError):
        SecurityQuery(0, 0.1)
    with pytest.raises(ValueError):
        SecurityQuery(0.1, 1.0)
    with pytest.raises(ValueError):
        SecurityQuery(0.1, 0.1, 3)


def test_table_csv_and_parallel_agree():
    alphas, eps = (0.0, 0.05, 0.34), (2e-4, 2e-6)
    serial = committee_size_table(alphas, eps, max_n=300)
    par = committee_size_table(alphas, eps, max_n=300, parallel=2)
    assert serial == par
    buf = io.StringIO()
    write_committee_size_csv(serial, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == f"# {CSV_VERSION}"
    assert lines[1] == ",".join(CSV_COLUMNS)
    assert lines[2].startswith("0.0,0.0002,4,")
    assert lines[-1] == f"0.34,2e-06,{NOT_FOUND},cap=300"
    with pytest.raises(ValueError):
        committee_size_table([], eps)


def test_nic_all_pass():
    params = GameParams(tr=100, c_mine=10, c_val=Fraction(1, 10**6), phi=10, n_tx=10, kappa_r=100)
    r = nic_check(params, 0, 7, Fraction(1, 100))
    assert r.nic and not r.degenerate
    assert r.faithful_fault_tolerance.margin == 3


def test_nic_minimum_reward_is_inclusive():
    params = GameParams(tr=Fraction(21, 10), c_mine=100, c_val=Fraction(1, 100), phi=10, n_tx=50, kappa_r=100)
    r = nic_check(params, 0, 7, Fraction(1, 100))
    assert r.minimum_reward.holds and r.minimum_reward.margin == 0


def test_nic_fault_tolerance_boundary():
    params = GameParams(tr=10, c_mine=0, c_val=0, phi=0, kappa_r=1)
    r = nic_check(params, fault_threshold(10), 10, 0)
    assert not r.faithful_fault_tolerance.holds and not r.nic
    assert nic_check(params, fault_threshold(10) - 1, 10, 0).nic


def test_nic_maximum_payload_and_degenerate_flag():
    params = GameParams(tr=10, c_mine=0, c_val=1, phi=2, kappa_r=100)
    r = nic_check(params, 0, 4, Fraction(1, 100))
    assert not r.maximum_payload.holds and r.maximum_payload.margin == -1
    free = GameParams(tr=10, c_mine=0, c_val=0, phi=5, kappa_r=0)
    assert nic_check(free, 0, 4, 0).degenerate
    assert nic_check(free, 0, 4, 0).maximum_payload.holds
    assert nic_check(params, 0, 4, Fraction(1, 50)).lines()[-1] == "nic pass"
