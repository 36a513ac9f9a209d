import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from moadmit.quota import (Accepted, ClusterQuota, DomainError, QuotaLedger, QuotaParams, Rejected, daily_reset,
                           entropy, params_from_text, params_to_text, quota_cost, record_false_negative,
                           try_accept)

probs = st.floats(0.0, 1.0, allow_nan=False)


def _h(p):
    # independent evaluation of the binary entropy terms
    terms = [x * math.log(x) / math.log(2) for x in (p, 1 - p) if x > 0]
    return -sum(terms)


def test_entropy_examples():
    assert entropy(0.5) == 1.0
    assert entropy(0.0) == 0.0 and entropy(1.0) == 0.0
    assert entropy(0.9) == pytest.approx(0.468996, abs=1e-6)
    for bad in (-0.1, 1.1, math.nan):
        with pytest.raises(DomainError):
            entropy(bad)


@given(probs)
def test_entropy_symmetry_and_range(p):
    assert entropy(p) == pytest.approx(entropy(1 - p), abs=1e-12)
    assert 0.0 <= entropy(p) <= 1.0
    assert entropy(p) == pytest.approx(_h(p), abs=1e-12)


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
def test_entropy_increasing_below_half(a, b):
    a, b = sorted((a, b))
    if a < b:
        assert entropy(a) <= entropy(b)


def test_quota_cost_examples():
    assert quota_cost(1.0, 0) == 1.0
    assert quota_cost(0.5, 0) == 2.0
    assert quota_cost(0.99, 0) == pytest.approx(1.080793, abs=1e-6)
    assert quota_cost(1.0, 4) == pytest.approx(0.1, abs=1e-6)
    assert quota_cost(1.0, 3) == 0.1
    assert quota_cost(0.6, 0) == pytest.approx(1.970951, abs=1e-6)


@given(probs, st.integers(0, 50), st.floats(0.01, 200), st.floats(0, 5))
def test_cost_floor_and_monotonicity(p, fnc, gamma, beta):
    params = QuotaParams(gamma=gamma, beta=beta)
    c = quota_cost(p, fnc, params)
    assert c >= params.c_min
    assert quota_cost(p, fnc + 1, params) <= c
    assert quota_cost(p, fnc, QuotaParams(gamma=gamma * 2, beta=beta)) >= c


@pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"beta": -1.0}, {"c_min": 0.0}, {"daily_multiplier": 0.0},
                                {"min_daily_quota": -1.0}])
def test_param_validation(kw):
    with pytest.raises(ValueError):
        QuotaParams(**kw)


def _ledger(remaining, fnc=0):
    led = QuotaLedger()
    led.clusters["a"] = ClusterQuota(remaining, fnc)
    return led


def test_try_accept_examples():
    led = _ledger(1.0)
    assert try_accept(led, "a", 1.0) == Accepted(1.0)
    assert led.remaining("a") == 0.0
    led = _ledger(0.5)
    before = led.state_digest()
    assert try_accept(led, "a", 0.5) == Rejected(2.0)
    assert led.remaining("a") == 0.5 and led.state_digest() == before
    led = _ledger(0.5, fnc=4)
    res = try_accept(led, "a", 1.0)
    assert isinstance(res, Accepted) and res.cost == pytest.approx(0.1, abs=1e-12)
    assert led.remaining("a") == pytest.approx(0.4, abs=1e-12)


def test_unknown_cluster_auto_initialized():
    led = QuotaLedger()
    assert isinstance(led.try_accept("new", 1.0), Accepted)
    assert "new" in led.auto_initialized
    assert led.remaining("new") == 4.0


def test_false_negatives_are_per_cluster():
    led = QuotaLedger()
    daily_reset(led, {"a": 3, "b": 3})
    for _ in range(3):
        record_false_negative(led, "a")
    assert led.fnc("a") == 3 and led.fnc("b") == 0
    assert try_accept(led, "a", 1.0) == Accepted(0.1)


def test_daily_reset():
    led = QuotaLedger()
    daily_reset(led, {"a": 10, "b": 0})
    assert led.clusters["a"].daily_quota == 20.0 and led.remaining("a") == 20.0
    assert led.clusters["b"].daily_quota == 5.0
    record_false_negative(led, "a")
    led.try_accept("a", 0.7)
    daily_reset(led, {"a": 1})
    assert led.fnc("a") == 0 and led.remaining("a") == 5.0
    # clusters absent from the counts fall to the floor
    assert led.remaining("b") == 5.0
    with pytest.raises(ValueError):
        daily_reset(led, {"a": -1})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), probs, st.booleans()), max_size=60),
       st.dictionaries(st.sampled_from("abc"), st.integers(0, 6)))
def test_conservation_and_rejection_purity(ops, counts):
    led = QuotaLedger(QuotaParams(gamma=3.0))
    led.daily_reset(counts)
    charged = {}
    for cid, p, fn in ops:
        if fn:
            led.record_false_negative(cid)
            continue
        before = led.state_digest()
        prev_remaining = led.remaining(cid)
        res = led.try_accept(cid, p)
        if isinstance(res, Accepted):
            charged[cid] = charged.get(cid, Fraction(0)) + Fraction(res.cost)
            assert led.remaining(cid) <= prev_remaining
        else:
            assert led.state_digest() == before
        assert 0.0 <= led.remaining(cid) <= led.clusters[cid].daily_quota
    for cid, e in led.clusters.items():
        assert Fraction(e.daily_quota) - e.remaining_exact == charged.get(cid, 0)


def test_params_text_round_trip():
    params, counts = QuotaParams(2.5, 0.005, 0.1, 3.0, 1.0), {"c1": 4, "c0": 0}
    assert params_from_text(params_to_text(params, counts)) == (params, counts)
    with pytest.raises(ValueError):
        params_from_text("garbage\n")
