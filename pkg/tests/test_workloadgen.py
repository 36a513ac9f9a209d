import itertools

import numpy as np
import pytest

from moadmit.correction import cosine
from moadmit.core import Trace
from moadmit.rules import rule_stats
from moadmit.traceio import format_trace
from moadmit.workloadgen import (DAY_MS, ConfigError, GenConfig, describe, generate, imbalance_ratio,
                                 planted_rule)


def _incidents(trace: Trace, group_size: int):
    """MO rows grouped per incident: ids number an incident's rows consecutively."""
    mo = [i for i in range(len(trace)) if trace.labels[i] == 1]
    by_cluster = {}
    for i in mo:
        by_cluster.setdefault(trace.cluster_ids[i], []).append(i)
    for rows in by_cluster.values():
        rows.sort(key=lambda i: trace.query_ids[i])
        for k in range(0, len(rows), group_size):
            yield rows[k:k + group_size]


def test_determinism_bytes():
    cfg = GenConfig(seed=7, n_clusters=3, queries_per_cluster=1000)
    a = [format_trace(t) for t in generate(cfg)]
    b = [format_trace(t) for t in generate(cfg)]
    assert a == b
    assert a != [format_trace(t) for t in generate(GenConfig(seed=8, n_clusters=3, queries_per_cluster=1000))]


@pytest.mark.parametrize("seed", range(5))
def test_mo_count_within_tolerance(seed):
    for day in generate(GenConfig(seed=seed, n_clusters=10, queries_per_cluster=5000)):
        assert 80 <= day.mo_count <= 120


def test_days_are_sorted_and_consecutive(small_days):
    for d, t in enumerate(small_days):
        assert np.all(np.diff(t.arrival_ms) >= 0)
        assert t.arrival_ms.min() >= d * DAY_MS and t.arrival_ms.max() < (d + 1) * DAY_MS
        assert np.all(np.isfinite(t.features))
        assert len(set(t.query_ids)) == len(t)


def test_incident_groups_are_cosine_similar():
    cfg = GenConfig(seed=3, n_clusters=5, queries_per_cluster=4000, mo_ratio=0.005)
    for t in generate(cfg):
        groups = list(_incidents(t, cfg.mo_group_size))
        assert groups and all(len(g) == cfg.mo_group_size for g in groups)
        for g in groups:
            for a, b in itertools.combinations(g, 2):
                assert cosine(t.features[a], t.features[b]) >= 0.9999


def test_planted_rule_recoverable_with_hard_negatives(small_days):
    rule = planted_rule()
    for t in small_days:
        s = rule_stats(rule, t.features, t.labels)
        assert s.positive_retention >= 0.95
        kept = rule.evaluate_matrix(t.features)
        precision = t.labels[kept].sum() / kept.sum()
        assert precision < 0.5


def test_default_config_rule_precision_below_half():
    t = generate(GenConfig(seed=0))[0]
    kept = planted_rule().evaluate_matrix(t.features)
    assert t.labels[kept].sum() / kept.sum() < 0.5


def test_repetition_rate_near_config():
    t = generate(GenConfig(seed=2, n_clusters=4, queries_per_cluster=5000))[0]
    assert 0.7 < describe(t).repetition_rate < 0.85


@pytest.mark.parametrize("kwargs", [
    {"n_clusters": 0}, {"mo_ratio": 0.0}, {"mo_ratio": 1.0}, {"repeat_rate": 1.5}, {"mo_group_size": 0},
    {"hard_negative_rate": -0.1}, {"days": 0}, {"transient_mo_fraction": 0.9, "hidden_mo_fraction": 0.2},
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        GenConfig(**kwargs)


def _trace(vectors, labels):
    n = len(labels)
    return Trace([f"q{i}" for i in range(n)], list(range(n)), ["c"] * n, labels, [1.0] * n, vectors)


def test_describe_examples():
    X = np.arange(2000.0).reshape(1000, 2)
    p = describe(_trace(X, [1, 1] + [0] * 998))
    assert p.imbalance == "1:499" and p.repetition_rate == 0.0 and p.mo_count == 2
    p = describe(_trace(np.ones((4, 2)), [0, 0, 0, 0]))
    assert p.repetition_rate == 0.75
    assert imbalance_ratio(0, 5) == "0:5"
