"""Event-ordered trace replay, metrics and cost accounting, ablation and sweep harnesses."""
from __future__ import annotations

import csv
import heapq
import io
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (Decision, Label, Observed, Outcome, OutcomeClass, SchemaMismatch, Source,
                   Trace, Verdict, classify_outcome, fmt_float, unique_rows)
from .pipeline import DECISION_THRESHOLD, MODEL_ONLY, BuildConfig, Pipeline, Toggles, build_pipeline
from .quota import QuotaParams
from .traceio import ArtifactBundle

DAY_MS = 86_400_000
FEEDBACK_MODES = ("completion", "immediate")


@dataclass(frozen=True)
class CostModel:
    provisioned_rate: float = 0.3
    serverless_rate: float = 0.5
    free_serverless_allowance: float = 2000.0

    def __post_init__(self):
        if not (self.provisioned_rate > 0 and self.serverless_rate > 0):
            raise ValueError("rates must be positive")
        if self.free_serverless_allowance < 0:
            raise ValueError("allowance must be >= 0")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool = False
    recall_undefined: bool = False
    f1_undefined: bool = False


def compute_metrics(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    if min(tp, fp, fn, tn) < 0:
        raise ValueError("counts must be nonnegative")
    total = tp + fp + fn + tn
    acc = (tp + tn) / total if total else 0.0
    p_undef, r_undef = tp + fp == 0, tp + fn == 0
    precision = 0.0 if p_undef else tp / (tp + fp)
    recall = 0.0 if r_undef else tp / (tp + fn)
    f1_undef = precision + recall == 0
    f1 = 0.0 if f1_undef else 2 * precision * recall / (precision + recall)
    return Metrics(acc, precision, recall, f1, p_undef, r_undef, f1_undef)


_CLASS_BY_CODE = (OutcomeClass.TN, OutcomeClass.FN, OutcomeClass.FP, OutcomeClass.TP)


@dataclass(frozen=True)
class CostBreakdown:
    fn_wasted_cpu_h: float
    fp_serverless_cpu_h: float
    tp_serverless_cpu_h: float
    monetary_cost_usd: float


def compute_cost(classes, cpu_time_s, cost_model: CostModel = CostModel()) -> CostBreakdown:
    """Costs from per-query outcome classes and CPU seconds."""
    code = {c: k for k, c in enumerate(_CLASS_BY_CODE)}
    codes = np.fromiter((code[c] for c in classes), dtype=np.int64, count=len(classes))
    return _cost_from_codes(codes, cpu_time_s, cost_model)


def _cost_from_codes(codes, cpu_time_s, cost_model: CostModel) -> CostBreakdown:
    sums = np.bincount(codes, weights=np.asarray(cpu_time_s, dtype=np.float64), minlength=4)
    tn_h, fn_h, fp_h, tp_h = (float(x) / 3600 for x in sums)
    serverless = fp_h + tp_h
    cost = fn_h * cost_model.provisioned_rate + max(0.0, serverless - cost_model.free_serverless_allowance) \
        * cost_model.serverless_rate
    return CostBreakdown(fn_h, fp_h, tp_h, cost)


@dataclass(frozen=True)
class LogEntry:
    query_id: str
    cluster_id: str
    verdict: Verdict
    source: Source
    confidence: float
    cost_charged: float
    outcome: OutcomeClass


@dataclass
class ReplayReport:
    tp: int
    fp: int
    fn: int
    tn: int
    metrics: Metrics
    cost: CostBreakdown
    per_cluster: dict[str, dict[str, int]]
    sources: dict[str, int]
    index_sizes: dict[str, int]
    quota_utilization: dict[str, float]
    quota_accepted: int
    entries: list[LogEntry] | None = field(repr=False, default=None)
    toggles: Toggles = Toggles()
    ledger_digest: str = ""
    _log_factory: object = field(repr=False, default=None, compare=False)

    @property
    def log(self) -> list[LogEntry]:
        """Per-query decision log in trace order, built on first access."""
        if self.entries is None:
            self.entries = self._log_factory() if self._log_factory else []
        return self.entries

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return self.metrics.accuracy

    @property
    def precision(self) -> float:
        return self.metrics.precision

    @property
    def recall(self) -> float:
        return self.metrics.recall

    @property
    def f1(self) -> float:
        return self.metrics.f1

    def to_text(self) -> str:
        m, c = self.metrics, self.cost
        lines = [
            "moadmit-replay-report v1",
            f"toggles rule_filter={self.toggles.rule_filter} correction={self.toggles.correction} "
            f"local_models={self.toggles.local_models} quota={self.toggles.quota}",
            f"tp {self.tp}", f"fp {self.fp}", f"fn {self.fn}", f"tn {self.tn}",
            f"accuracy {m.accuracy:.6f}",
            f"precision {m.precision:.4f}" + (" undefined" if m.precision_undefined else ""),
            f"recall {m.recall:.4f}" + (" undefined" if m.recall_undefined else ""),
            f"f1 {m.f1:.4f}" + (" undefined" if m.f1_undefined else ""),
            f"fn_wasted_cpu_h {c.fn_wasted_cpu_h:.6f}",
            f"fp_serverless_cpu_h {c.fp_serverless_cpu_h:.6f}",
            f"tp_serverless_cpu_h {c.tp_serverless_cpu_h:.6f}",
            f"monetary_cost_usd {c.monetary_cost_usd:.2f}",
            f"quota_accepted {self.quota_accepted}",
            f"ledger_digest {self.ledger_digest}",
        ]
        lines += [f"source {k} {v}" for k, v in self.sources.items()]
        for cid, d in self.per_cluster.items():
            lines.append(f"cluster {cid} " + " ".join(f"{k}={v}" for k, v in d.items()))
        lines += [f"index {cid} {n}" for cid, n in self.index_sizes.items()]
        lines += [f"quota_utilization {cid} {u:.6f}" for cid, u in self.quota_utilization.items()]
        return "\n".join(lines) + "\n"

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_id", "verdict", "source", "confidence", "cost_charged", "outcome_class"])
        for e in self.log:
            w.writerow([e.query_id, e.verdict.value, e.source.value, fmt_float(e.confidence),
                        fmt_float(e.cost_charged), e.outcome.name])
        return buf.getvalue()


def _precompute(pipeline: Pipeline, trace: Trace):
    """Batch rule mask and model confidences; both are pure in (bundle, record)."""
    X = trace.features
    n = len(trace)
    passes = pipeline.rule.evaluate_matrix(X) if pipeline.toggles.rule_filter else np.ones(n, dtype=bool)
    conf = np.full(n, np.nan)
    # group rows by the model that scores them and score each distinct row once
    by_model: dict[int, tuple[object, list[np.ndarray]]] = {}
    for cid, idx in trace.cluster_index().items():
        idx = idx[passes[idx]]
        if len(idx):
            m = pipeline.router.model_for(cid, pipeline.toggles.local_models)
            by_model.setdefault(id(m), (m, []))[1].append(idx)
    # scores are pure in (model, row) and traces are read-only, so replays of
    # one trace (ablations, sweeps) share them; the memo holds each model so
    # its id stays unique
    memo = trace.__dict__.setdefault("_score_memo", {})
    for m, parts in by_model.values():
        idx = np.concatenate(parts)
        known = memo.setdefault(id(m), (m, np.full(n, np.nan)))[1]
        todo = idx[np.isnan(known[idx])]
        if len(todo):
            first, inverse = unique_rows(X[todo])
            known[todo] = m.score_matrix(X[todo[first]])[inverse]
        conf[idx] = known[idx]
    return passes, conf


def replay(trace: Trace, bundle: ArtifactBundle | None = None, cost_model: CostModel = CostModel(),
           toggles: Toggles = Toggles(), seed: int = 0, feedback: str = "completion",
           pipeline: Pipeline | None = None, params: QuotaParams | None = None) -> ReplayReport:
    """Replay ``trace`` through a fresh pipeline in a single merged event order.

    Decisions happen at arrival; an admitted query's outcome is fed back at
    completion (arrival + CPU time) or, with ``feedback="immediate"``, at its
    arrival. At equal timestamps decisions precede feedback; ties within a
    kind go by query_id. ``seed`` is accepted for interface symmetry: the
    replay itself draws no randomness.
    """
    if feedback not in FEEDBACK_MODES:
        raise ValueError(f"feedback must be one of {FEEDBACK_MODES}")
    if pipeline is None:
        if bundle is None:
            raise ValueError("need a bundle or a pipeline")
        if bundle.schema.dimension != trace.dimension:
            raise SchemaMismatch(f"trace has {trace.dimension} features, bundle schema {bundle.schema.dimension}")
        pipeline = Pipeline.from_bundle(bundle, toggles, params)
    elif pipeline.index.dimension not in (None, trace.dimension):
        raise SchemaMismatch("trace dimension differs from the pipeline's index")
    toggles = pipeline.toggles
    passes, conf = _precompute(pipeline, trace)

    n = len(trace)
    ids = trace.query_ids
    cids = trace.cluster_ids
    arrival = trace.arrival_ms.tolist()
    labels = trace.labels.tolist()
    cpu = trace.cpu_time_s.tolist()
    passes_l = passes.tolist()
    conf_l = conf.tolist()
    records: dict[int, object] = {}
    decisions = [None] * n
    pending: list[tuple[int, str, int]] = []
    day = arrival[0] // DAY_MS if n else 0
    day_counts: dict[str, int] = {}
    filtered = Decision(Verdict.ADMIT, Source.RULE_FILTER, 0.0)
    index, counters = pipeline.index, pipeline.counters

    def apply_feedback(until: int | None):
        while pending and (until is None or pending[0][0] < until):
            t, _, j = heapq.heappop(pending)
            rec = records.get(j) or trace._build(j)
            pipeline.feedback(decisions[j], Outcome(ids[j], Observed.MO_FAILED, t), rec)

    order = np.lexsort((np.array(ids), trace.arrival_ms)).tolist() if n else []
    for i in order:
        t = arrival[i]
        if pending and pending[0][0] < t:
            apply_feedback(t)
        if t // DAY_MS != day:
            # new day: re-provision quota from what the previous day actually saw
            pipeline.ledger.daily_reset(day_counts)
            day, day_counts = t // DAY_MS, {}
        mo = labels[i] == 1
        if mo:
            day_counts[cids[i]] = day_counts.get(cids[i], 0) + 1
        c = conf_l[i]
        if toggles.rule_filter and not passes_l[i]:
            # same result decide() gives for a rule-rejected record, without building it
            pipeline.counters.rule_evals += 1
            d = filtered
        elif c < DECISION_THRESHOLD and not (toggles.correction and index.size(cids[i])):
            # model-negative and nothing stored to match: decide() would admit on the model
            counters.rule_evals += toggles.rule_filter
            if toggles.correction:
                counters.index_lookups += 1
                index.lookups += 1
            counters.model_scores += 1
            d = Decision(Verdict.ADMIT, Source.MODEL, c)
        else:
            rec = records[i] = trace._build(i)
            d = pipeline.decide(rec, confidence=None if c != c else c, passes_rule=True)
        decisions[i] = d
        # succeeded outcomes leave pipeline state untouched, so only failures are scheduled
        if mo and d.verdict is Verdict.ADMIT:
            done = t if feedback == "immediate" else t + int(round(cpu[i] * 1000))
            heapq.heappush(pending, (done, ids[i], i))
    apply_feedback(None)
    return _report(trace, decisions, pipeline, cost_model, toggles)



def _report(trace: Trace, decisions, pipeline: Pipeline, cost_model: CostModel, toggles: Toggles) -> ReplayReport:
    offload = np.fromiter((d.verdict is Verdict.OFFLOAD for d in decisions), dtype=bool, count=len(decisions))
    mo = trace.labels == 1
    code = 2 * offload.astype(np.int64) + mo  # indexes _CLASS_BY_CODE
    tn, fn, fp, tp = (int(x) for x in np.bincount(code, minlength=4))
    per_cluster = {}
    for cid, idx in sorted(trace.cluster_index().items()):
        c = np.bincount(code[idx], minlength=4)
        per_cluster[cid] = {"tp": int(c[3]), "fp": int(c[2]), "fn": int(c[1]), "tn": int(c[0])}
    sources = {s.value: 0 for s in Source}
    accepted = 0
    # rule-filtered records share one Decision object, so count by identity first
    distinct = {id(d): d for d in decisions}
    for key, k in Counter(map(id, decisions)).items():
        d = distinct[key]
        sources[d.source.value] += k
        accepted += k * (d.quota_cost_charged > 0)

    def build_log():
        ids, cids = trace.query_ids, trace.cluster_ids
        classes = [_CLASS_BY_CODE[k] for k in code.tolist()]
        return [LogEntry(ids[i], cids[i], d.verdict, d.source, d.confidence, d.quota_cost_charged, classes[i])
                for i, d in enumerate(decisions)]

    report = ReplayReport(
        tp, fp, fn, tn, compute_metrics(tp, fp, fn, tn), _cost_from_codes(code, trace.cpu_time_s, cost_model),
        per_cluster, sources, pipeline.index.sizes(), pipeline.ledger.utilization(),
        accepted, None, toggles, pipeline.ledger.state_digest(),
    )
    report._log_factory = build_log
    return report


# Table-5 order; the "w/o Global and Local Models" row has no toggle and is
# replaced by the model-only baseline at the end.
ABLATIONS = (
    ("Full pipeline", Toggles()),
    ("w/o Discriminative Rule Filtering", Toggles(rule_filter=False)),
    ("w/o Local Models", Toggles(local_models=False)),
    ("w/o Misprediction Correction", Toggles(correction=False)),
    ("w/o Self-tuning Quota Management", Toggles(quota=False)),
    ("Model only", MODEL_ONLY),
)


def run_ablation(day1: Trace, day2: Trace, config: BuildConfig = BuildConfig(),
                 cost_model: CostModel = CostModel(), bundle: ArtifactBundle | None = None,
                 feedback: str = "completion") -> list[tuple[str, ReplayReport]]:
    bundle = bundle or build_pipeline(day1, config=config)
    return [(name, replay(day2, bundle, cost_model, t, feedback=feedback)) for name, t in ABLATIONS]


def sweep_params(day1: Trace, day2: Trace, gamma_list=(1.0,), beta_list=(0.5,),
                 config: BuildConfig = BuildConfig(), cost_model: CostModel = CostModel(),
                 bundle: ArtifactBundle | None = None) -> list[tuple[float, float, ReplayReport]]:
    bundle = bundle or build_pipeline(day1, config=config)
    out = []
    for g in gamma_list:
        for b in beta_list:
            params = replace(bundle.quota_params, gamma=float(g), beta=float(b))
            out.append((float(g), float(b), replay(day2, bundle, cost_model, params=params)))
    return out


def metrics_table(rows) -> str:
    """Table-4 style text table from (name, report) rows."""
    header = ["Variant", "TN", "TP", "FN", "FP", "Accuracy", "Precision", "Recall", "F1"]
    body = [[name, str(r.tn), str(r.tp), str(r.fn), str(r.fp), f"{r.accuracy:.6f}", f"{r.precision:.4f}",
             f"{r.recall:.4f}", f"{r.f1:.4f}"] for name, r in rows]
    widths = [max(len(row[k]) for row in [header, *body]) for k in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(header), *map(fmt, body)]) + "\n"


def report_from_log(text: str) -> ReplayReport:
    """Rebuild counts and metrics from a decision-log CSV (no costs: CPU times are not logged)."""
    reader = csv.DictReader(io.StringIO(text))
    counts = {c: 0 for c in OutcomeClass}
    sources = {s.value: 0 for s in Source}
    log = []
    accepted = 0
    for row in reader:
        oc = OutcomeClass[row["outcome_class"]]
        counts[oc] += 1
        sources[row["source"]] += 1
        cost = float(row["cost_charged"])
        accepted += cost > 0
        log.append(LogEntry(row["query_id"], "", Verdict(row["verdict"]), Source(row["source"]),
                            float(row["confidence"]), cost, oc))
    tp, fp, fn, tn = (counts[c] for c in (OutcomeClass.TP, OutcomeClass.FP, OutcomeClass.FN, OutcomeClass.TN))
    return ReplayReport(tp, fp, fn, tn, compute_metrics(tp, fp, fn, tn), CostBreakdown(0.0, 0.0, 0.0, 0.0),
                        {}, sources, {}, {}, accepted, log)

