"""Admission control for memory-overloading queries: rule filter, boosted-tree
classifier, false-negative correction index and quota gate, with a replay
simulator and synthetic workload generator."""
from .core import (AdmitError, Decision, DimensionError, FeatureSchema, Label, Observed, Outcome,
                   OutcomeClass, QueryRecord, SchemaMismatch, Source, Trace, Verdict, classify_outcome,
                   feature_vector)
from .correction import CorrectionIndex, cosine
from .model import HybridRouter, TrainConfig, TreeEnsemble, train, train_hybrid
from .pipeline import BuildConfig, Pipeline, Toggles, build_pipeline
from .quota import QuotaLedger, QuotaParams, entropy, quota_cost
from .rules import DiscriminativeRule, SingleFeatureRule, generate_rule, rule_stats
from .sim import CostModel, compute_cost, compute_metrics, replay, run_ablation, sweep_params
from .traceio import ArtifactBundle, load_bundle, read_trace, save_bundle, write_trace
from .workloadgen import GenConfig, generate

__version__ = "0.1.0"
