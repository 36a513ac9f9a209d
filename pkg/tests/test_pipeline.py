import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moadmit.core import Decision, Label, Observed, Outcome, QueryRecord, Source, Verdict
from moadmit.correction import CorrectionIndex
from moadmit.model import HybridRouter, Tree, TreeEnsemble
from moadmit.pipeline import (MODEL_ONLY, BuildConfig, Pipeline, Toggles, build_pipeline, decide, feedback,
                              survivor_imbalance)
from moadmit.quota import ClusterQuota, QuotaLedger, quota_cost
from moadmit.rules import DiscriminativeRule

from conftest import SMALL_BUILD


def stump(feature, threshold, low, high, base=0.0):
    """One-split ensemble: margin base+low at or below the threshold, base+high above."""
    return TreeEnsemble([Tree([feature, -1, -1], [threshold, 0, 0], [1, -1, -1], [2, -1, -1], [0, low, high])],
                        base, 3)


def _pipeline(toggles=Toggles(), quota=10.0):
    rule = DiscriminativeRule.parse("GT(0,0)")
    # global: confident MO when feature 1 > 5; local for cluster "L" flags feature 2 instead
    router = HybridRouter(stump(1, 5.0, -4.0, 4.0), {"L": stump(2, 5.0, -4.0, 4.0)})
    ledger = QuotaLedger()
    ledger.daily_reset({"a": int(quota // 2), "L": int(quota // 2)})
    return Pipeline(rule, router, CorrectionIndex(dimension=3), ledger, toggles)


def rec(f, cluster="a", label=Label.MO, qid="q", t=0):
    return QueryRecord(qid, t, cluster, np.asarray(f, dtype=float), 1.0, label)


def test_rule_filter_short_circuits():
    p = _pipeline()
    before = p.ledger.state_digest()
    d = decide(p, rec([0.0, 9.0, 0.0]))
    assert d == Decision(Verdict.ADMIT, Source.RULE_FILTER, 0.0)
    c = p.counters
    assert (c.rule_evals, c.index_lookups, c.model_scores, c.quota_calls) == (1, 0, 0, 0)
    assert p.index.lookups == 0 and p.ledger.state_digest() == before


def test_model_positive_charges_quota():
    p = _pipeline()
    d = decide(p, rec([1.0, 9.0, 0.0]))
    conf = 1 / (1 + np.exp(-4.0))
    assert d.verdict is Verdict.OFFLOAD and d.source is Source.MODEL
    assert d.confidence == pytest.approx(conf)
    assert d.quota_cost_charged == pytest.approx(quota_cost(conf, 0))


def test_correction_after_feedback():
    p = _pipeline()
    r1 = rec([1.0, 0.0, 0.0], qid="q1")
    d1 = decide(p, r1)
    assert d1.verdict is Verdict.ADMIT and d1.source is Source.MODEL
    feedback(p, d1, Outcome("q1", Observed.MO_FAILED, 50), r1)
    assert p.index.size("a") == 1 and p.ledger.fnc("a") == 1
    d2 = decide(p, rec([1.0, 0.0, 0.0], qid="q2", t=60))
    assert d2.verdict is Verdict.OFFLOAD and d2.source is Source.CORRECTION_INDEX
    assert d2.confidence == 1.0 and d2.quota_cost_charged == quota_cost(1.0, 1)
    # other clusters are not corrected
    assert decide(p, rec([1.0, 0.0, 0.0], cluster="b")).source is Source.MODEL


def test_succeeded_feedback_changes_nothing():
    p = _pipeline()
    r = rec([1.0, 0.0, 0.0], label=Label.NON_MO)
    d = decide(p, r)
    before = (p.ledger.state_digest(), p.index.sizes())
    feedback(p, d, Outcome("q", Observed.SUCCEEDED, 5), r)
    assert (p.ledger.state_digest(), p.index.sizes()) == before


def test_offload_gets_no_feedback():
    p = _pipeline()
    d = decide(p, rec([1.0, 9.0, 0.0]))
    with pytest.raises(ValueError):
        feedback(p, d, Outcome("q", Observed.MO_FAILED, 5), rec([1.0, 9.0, 0.0]))


def test_quota_clamp():
    p = _pipeline()
    p.ledger.clusters["a"] = ClusterQuota(0.2)
    d = p.decide(rec([1.0, 0.0, 0.0]), confidence=0.6)
    assert d == Decision(Verdict.ADMIT, Source.QUOTA_CLAMP, 0.6)
    assert p.ledger.remaining("a") == 0.2


def test_quota_off_never_flips():
    p = _pipeline(Toggles(quota=False), quota=0)
    p.ledger.clusters["a"] = ClusterQuota(0.0)
    d = decide(p, rec([1.0, 9.0, 0.0]))
    assert d.verdict is Verdict.OFFLOAD and d.quota_cost_charged == 0.0


def test_local_routing_and_toggle():
    v = [1.0, 0.0, 9.0]
    assert decide(_pipeline(), rec(v, cluster="L")).verdict is Verdict.OFFLOAD
    assert decide(_pipeline(Toggles(local_models=False)), rec(v, cluster="L")).verdict is Verdict.ADMIT


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.sampled_from(["a", "L", "zz"]))
def test_model_only_is_thresholded_global(v, cluster):
    p = _pipeline(MODEL_ONLY)
    d = decide(p, rec(v, cluster=cluster))
    s = p.router.global_model.score(v)
    assert d.confidence == s
    assert (d.verdict is Verdict.OFFLOAD) == (s >= 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=10))
def test_quota_off_decide_is_pure(vectors):
    p = _pipeline(Toggles(quota=False))
    p.index.insert("a", np.array([1.0, 1.0, 1.0]), 0)
    first = [decide(p, rec(v)) for v in vectors]
    assert [decide(p, rec(v)) for v in reversed(vectors)] == first[::-1]


def test_build_composition(small_days, small_bundle):
    day1 = small_days[0]
    b = small_bundle
    assert b.rule.leaf_count >= 1 and b.global_model.trees
    survivors = day1.subset(b.rule.evaluate_matrix(day1.features))
    pos = {}
    for c, y in zip(survivors.cluster_ids, survivors.labels):
        pos[c] = pos.get(c, 0) + int(y)
    assert sorted(b.local_models) == sorted(c for c, n in pos.items() if n > SMALL_BUILD.local_threshold)
    assert b.prev_day_mo_counts == day1.mo_counts_by_cluster()
    n_pos, n_neg = survivor_imbalance(day1, b.rule)
    raw_pos = day1.mo_count
    assert n_neg / n_pos < (len(day1) - raw_pos) / raw_pos
    fresh = Pipeline.from_bundle(b)
    assert fresh.index.size() == 0


def test_build_is_deterministic(small_days, small_bundle):
    again = build_pipeline(small_days[0], config=SMALL_BUILD)
    assert str(again.rule) == str(small_bundle.rule)
    assert again.global_model.to_text() == small_bundle.global_model.to_text()
    assert {c: m.to_text() for c, m in again.local_models.items()} == \
        {c: m.to_text() for c, m in small_bundle.local_models.items()}
    assert again.provenance == small_bundle.provenance


def test_toggles_without():
    assert Toggles().without("quota") == Toggles(quota=False)
    with pytest.raises(ValueError):
        Toggles().without("nothing")
