from __future__ import annotations

import itertools
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from ashwachain.bft import (
    AgreementRound,
    BftConfig,
    Outcome,
    Seat,
    collect_votes,
    endorse,
    fault_threshold,
    make_vote,
    run_agreement,
    supermajority_threshold,
)
from ashwachain.chain_core import KeyPair, PowBlock, ZERO_DIGEST
from ashwachain.csl import OpKind, Operation, count_valid_endorsements
from ashwachain.events import Trace

CFG = BftConfig(latency_window=1.0).resolved(1.0)


def committee(n, tag="c"):
    return [KeyPair.from_seed(f"{tag}{i}") for i in range(n)]


def op(i=0):
    return Operation(OpKind.POW_BLOCK, PowBlock(ZERO_DIGEST, 0, i, KeyPair.from_seed("m").identity, 1))


def template(keys, primary=0, view=0):
    ids = tuple(k.identity for k in keys)
    return AgreementRound(None, ids[primary], view, ids, 0.0)


def broadcast(keys, o, primary=0):
    return {s: [o] for s in range(len(keys)) if s != primary}


@pytest.mark.parametrize("n,expected", [(51, 35), (4, 3), (1, 1), (7, 5), (10, 7)])
def test_supermajority(n, expected):
    assert supermajority_threshold(n) == expected


@pytest.mark.parametrize("n,expected", [(52, 18), (51, 18), (4, 2), (7, 3), (10, 4)])
def test_fault_threshold(n, expected):
    assert fault_threshold(n) == expected


def test_thresholds_reject_empty_committee():
    with pytest.raises(ValueError):
        supermajority_threshold(0)
    with pytest.raises(ValueError):
        fault_threshold(0)


@given(st.integers(1, 3000))
def test_threshold_formulas(n):
    assert supermajority_threshold(n) == math.floor(2 * n / 3) + 1
    assert fault_threshold(n) == math.ceil((n + 2) / 3)


@given(st.integers(1, 3000))
def test_quorum_intersection_arithmetic(n):
    # two quorums overlap in at least n_f seats, so in a correct one when n_B < n_f
    assert 2 * supermajority_threshold(n) - n >= fault_threshold(n)


@pytest.mark.parametrize("n", range(1, 9))
def test_quorum_intersection_by_enumeration(n):
    k = supermajority_threshold(n)
    quorums = [set(c) for c in itertools.combinations(range(n), k)]
    for byz in range(fault_threshold(n)):
        bad = set(range(byz))
        assert all((a & b) - bad for a, b in itertools.combinations_with_replacement(quorums, 2))


def test_collect_votes_membership_signature_and_once_per_seat():
    keys = committee(4)
    r = template(keys)
    d = op().digest
    collect_votes(r, [make_vote(keys[1], 1, 0, d)])
    assert len(r.collected) == 1
    collect_votes(r, [make_vote(keys[1], 1, 0, d)])
    assert len(r.collected) == 1 and not r.violations
    collect_votes(r, [make_vote(keys[1], 1, 0, op(1).digest)])
    assert len(r.collected) == 1 and "duplicate" in r.violations[-1]
    outsider = KeyPair.from_seed("outsider")
    collect_votes(r, [make_vote(outsider, 2, 0, d)])
    assert 2 not in r.collected and "non-member" in r.violations[-1]
    collect_votes(r, [make_vote(keys[3], 3, 5, d)])
    assert 3 not in r.collected and "stale" in r.violations[-1]
    forged = make_vote(keys[2], 2, 0, d)
    collect_votes(r, [type(forged)(2, keys[2].identity, 0, d, bytes(32))])
    assert 2 not in r.collected and "signature" in r.violations[-1]


def test_all_honest_commit():
    keys = committee(4)
    o = op()
    res = run_agreement(template(keys), [Seat(i, k) for i, k in enumerate(keys)], broadcast(keys, o), CFG, random.Random(0), 0.0)
    assert res.outcome is Outcome.COMMITTED
    cert = res.operation
    assert cert.digest == o.digest
    assert count_valid_endorsements(cert, tuple(k.identity for k in keys)) >= 3
    assert set(res.commits_by_seat) == {0, 1, 2, 3}
    assert res.end == pytest.approx(1.0)


def test_silent_primary_then_next_seat_commits():
    keys = committee(4)
    seats = [Seat(i, k, correct=i != 0) for i, k in enumerate(keys)]
    res = run_agreement(template(keys, 0, 0), seats, {}, CFG, random.Random(0), 0.0)
    assert res.outcome is Outcome.VIEW_CHANGED
    assert res.end == pytest.approx(CFG.view_change_timeout)
    o = op()
    res2 = run_agreement(template(keys, 1, 1), seats, broadcast(keys, o, 1), CFG, random.Random(0), res.end)
    assert res2.outcome is Outcome.COMMITTED


def test_two_refusing_seats_force_reset():
    keys = committee(4)
    seats = [Seat(i, k, correct=i < 2, will_sign=(lambda o: True) if i < 2 else (lambda o: False)) for i, k in enumerate(keys)]
    res = run_agreement(template(keys), seats, broadcast(keys, op()), CFG, random.Random(0), 0.0)
    assert res.outcome is Outcome.RESET
    assert not res.committed


def test_observed_equivocation_changes_view():
    keys = committee(4)
    a, b = op(1), op(2)
    trace = Trace()
    # seat 1 sees both ops and withholds its vote, so neither side can reach quorum
    seats = [Seat(i, k, **({"will_sign": lambda o: False} if i == 1 else {})) for i, k in enumerate(keys)]
    res = run_agreement(template(keys), seats, {1: [a, b], 2: [a], 3: [b]}, CFG, random.Random(0), 0.0, trace)
    assert res.equivocation_detected
    assert res.outcome is Outcome.VIEW_CHANGED
    assert trace.of_kind("equivocation")


def test_late_votes_are_lost():
    keys = committee(4)
    slow = BftConfig(latency_window=1.0, delay_low=0.6, delay_high=0.7).resolved(1.0)
    res = run_agreement(template(keys), [Seat(i, k) for i, k in enumerate(keys)], broadcast(keys, op()), slow, random.Random(0), 0.0)
    # proposals land at ~0.65, the votes they trigger at ~1.3: past the deadline
    assert res.outcome is Outcome.RESET


def test_duplicate_identity_seats_vote_separately():
    keys = committee(3)
    seat_keys = [keys[0], keys[0], keys[1], keys[2]]
    ids = tuple(k.identity for k in seat_keys)
    r = AgreementRound(None, ids[2], 0, ids, 0.0)
    res = run_agreement(r, [Seat(i, k) for i, k in enumerate(seat_keys)], broadcast(seat_keys, op(), 2), CFG, random.Random(1), 0.0, primary_seat=2)
    assert res.outcome is Outcome.COMMITTED
    assert count_valid_endorsements(res.operation, ids) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        BftConfig(latency_window=-1.0).resolved(1.0)
    cfg = BftConfig().resolved(2.0)
    assert cfg.latency_window == 2.0 and cfg.view_change_timeout == 4.0 and cfg.delay_high == 0.5


@pytest.mark.parametrize("n", [4, 7, 10, 13, 16])
def test_message_count_is_quadratic(n):
    keys = committee(n, f"q{n}-")
    res = run_agreement(template(keys), [Seat(i, k) for i, k in enumerate(keys)], broadcast(keys, op()), CFG, random.Random(n), 0.0)
    assert res.outcome is Outcome.COMMITTED
    assert n * (n - 1) <= res.messages <= 4 * n * n


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 13), st.data())
def test_no_conflicting_commits_below_fault_threshold(n, data):
    """A colluding Byzantine primary splits the correct seats between two ops; neither side certifies."""
    keys = committee(n, f"s{n}-")
    n_b = data.draw(st.integers(0, fault_threshold(n) - 1))
    byz = set(data.draw(st.permutations(range(n)))[:n_b])
    primary = data.draw(st.sampled_from(sorted(byz))) if byz else 0
    a, b = op(1), op(2)
    correct = [s for s in range(n) if s not in byz and s != primary]
    half_a, half_b = correct[0::2], correct[1::2]
    others = [s for s in byz if s != primary]
    plan = {s: [a] for s in half_a} | {s: [b] for s in half_b} | {s: [a, b] for s in others}
    routes = {a.digest: half_a + others, b.digest: half_b + others}
    seats = [
        Seat(i, k, correct=i not in byz, colluding=i in byz, vote_route=(lambda o: routes[o.digest]) if i in byz else None)
        for i, k in enumerate(keys)
    ]
    rng = random.Random(data.draw(st.integers(0, 2**32)))
    res = run_agreement(template(keys, primary), seats, plan, CFG, rng, 0.0)
    assert len(res.committed) <= 1


def test_equivocation_at_fault_threshold_breaks_safety():
    n = 4
    keys = committee(n, "t")
    byz = {0, 1}
    a, b = op(1), op(2)
    plan = {2: [a], 3: [b], 1: [a, b]}
    routes = {a.digest: [2, 1], b.digest: [3, 1]}
    seats = [
        Seat(i, k, correct=i not in byz, colluding=i in byz, vote_route=(lambda o: routes[o.digest]) if i in byz else None)
        for i, k in enumerate(keys)
    ]
    res = run_agreement(template(keys, 0), seats, plan, CFG, random.Random(0), 0.0)
    assert len(res.committed) == 2


def test_endorsement_is_seat_specific():
    k = KeyPair.from_seed("x")
    d = op().digest
    assert endorse(k, d, 0).signature != endorse(k, d, 1).signature
