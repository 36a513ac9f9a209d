"""Online decision path (rule filter, correction, hybrid model, quota gate) and its feedback loop."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (Decision, FeatureSchema, Observed, Outcome, QueryRecord, Source, Trace,
                   Verdict)
from .correction import DEFAULT_SIMILARITY, CorrectionIndex
from .model import HybridRouter, TrainConfig, train_hybrid
from .quota import Accepted, QuotaLedger, QuotaParams
from .rules import DiscriminativeRule, NoPositives, generate_rule, validation_split
from .traceio import ArtifactBundle, Provenance, trace_digest

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class Toggles:
    rule_filter: bool = True
    correction: bool = True
    local_models: bool = True
    quota: bool = True

    def without(self, name: str) -> "Toggles":
        if not hasattr(self, name):
            raise ValueError(f"unknown component {name!r}")
        return replace(self, **{name: False})


MODEL_ONLY = Toggles(rule_filter=False, correction=False, local_models=False, quota=False)


@dataclass
class Counters:
    rule_evals: int = 0
    index_lookups: int = 0
    model_scores: int = 0
    quota_calls: int = 0
    feedback_inserts: int = 0


class Pipeline:
    def __init__(self, rule: DiscriminativeRule, router: HybridRouter, index: CorrectionIndex,
                 ledger: QuotaLedger, toggles: Toggles = Toggles()):
        self.rule = rule
        self.router = router
        self.index = index
        self.ledger = ledger
        self.toggles = toggles
        self.counters = Counters()

    @property
    def params(self) -> QuotaParams:
        return self.ledger.params

    @classmethod
    def from_bundle(cls, bundle: ArtifactBundle, toggles: Toggles = Toggles(),
                    params: QuotaParams | None = None,
                    similarity_threshold: float = DEFAULT_SIMILARITY) -> "Pipeline":
        router = HybridRouter(bundle.global_model, dict(bundle.local_models))
        index = CorrectionIndex(similarity_threshold, dimension=bundle.schema.dimension)
        for cid, text in sorted(bundle.index_snapshots.items()):
            index.load_snapshot(cid, text)
        ledger = QuotaLedger(params or bundle.quota_params)
        ledger.daily_reset(bundle.prev_day_mo_counts)
        return cls(bundle.rule, router, index, ledger, toggles)

    def model_confidence(self, record: QueryRecord) -> float:
        self.counters.model_scores += 1
        return self.router.route_score(record.cluster_id, record.features, self.toggles.local_models)

    def decide(self, record: QueryRecord, confidence: float | None = None,
               passes_rule: bool | None = None) -> Decision:
        """Staged decision for one query.

        ``confidence`` and ``passes_rule`` let a caller supply values it
        computed in batch; both are pure functions of the bundle and record.
        """
        t = self.toggles
        if t.rule_filter:
            self.counters.rule_evals += 1
            ok = self.rule(record.features) if passes_rule is None else passes_rule
            if not ok:
                return Decision(Verdict.ADMIT, Source.RULE_FILTER, 0.0)
        positive = False
        if t.correction:
            self.counters.index_lookups += 1
            if self.index.lookup(record.cluster_id, record.features) is not None:
                source, p, positive = Source.CORRECTION_INDEX, 1.0, True
        if not positive:
            if confidence is None:
                p = self.model_confidence(record)
            else:
                self.counters.model_scores += 1
                p = float(confidence)
            source, positive = Source.MODEL, p >= DECISION_THRESHOLD
        if not positive:
            return Decision(Verdict.ADMIT, source, p)
        if not t.quota:
            return Decision(Verdict.OFFLOAD, source, p)
        self.counters.quota_calls += 1
        res = self.ledger.try_accept(record.cluster_id, p)
        if isinstance(res, Accepted):
            return Decision(Verdict.OFFLOAD, source, p, res.cost)
        return Decision(Verdict.ADMIT, Source.QUOTA_CLAMP, p)

    def feedback(self, decision: Decision, outcome: Outcome, record: QueryRecord) -> None:
        if decision.verdict is not Verdict.ADMIT:
            raise ValueError("only admitted queries produce feedback")
        if outcome.observed is Observed.MO_FAILED:
            self.counters.feedback_inserts += 1
            self.index.insert(record.cluster_id, record.features, outcome.completed_ms)
            self.ledger.record_false_negative(record.cluster_id)


def decide(pipeline: Pipeline, record: QueryRecord) -> Decision:
    return pipeline.decide(record)


def feedback(pipeline: Pipeline, decision: Decision, outcome: Outcome, record: QueryRecord) -> None:
    pipeline.feedback(decision, outcome, record)


@dataclass(frozen=True)
class BuildConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    local_threshold: int = 100
    quota: QuotaParams = field(default_factory=QuotaParams)
    validation_fraction: float = 0.2
    seed: int = 0


def build_pipeline(training_trace: Trace, schema: FeatureSchema | None = None,
                   config: BuildConfig = BuildConfig()) -> ArtifactBundle:
    schema = schema or FeatureSchema(training_trace.dimension)
    if training_trace.mo_count == 0:
        raise NoPositives("training trace has no MO queries")
    X, y = training_trace.features, training_trace.labels
    tr, va = validation_split(len(training_trace), config.validation_fraction)
    generated = generate_rule(X[tr], y[tr], X[va], y[va], schema)
    keep = generated.rule.evaluate_matrix(X)
    survivors = training_trace.subset(keep)
    train_cfg = replace(config.train, seed=config.seed)
    router = train_hybrid(survivors.features, survivors.labels, survivors.cluster_ids,
                          train_cfg, config.local_threshold)
    counts = training_trace.mo_counts_by_cluster()
    last = int(training_trace.arrival_ms[-1]) if len(training_trace) else 0
    provenance = Provenance(trace_digest(training_trace), last, config.seed)
    return ArtifactBundle(schema, generated.rule, router.global_model, router.locals, config.quota,
                          counts, provenance)


def survivor_imbalance(trace: Trace, rule: DiscriminativeRule) -> tuple[int, int]:
    """(positives, negatives) among records the rule keeps."""
    keep = rule.evaluate_matrix(trace.features)
    y = trace.labels[keep]
    return int((y == 1).sum()), int((y == 0).sum())
