"""Domain types shared by every stage of the admission pipeline.

Everything here is an immutable value type with no I/O. "Positive" always
means MO / Offload.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DIMENSION = 163


class AdmitError(Exception):
    """Base class for all package errors."""


class DimensionError(AdmitError):
    pass


class SchemaMismatch(AdmitError):
    pass


class Label(enum.IntEnum):
    NON_MO = 0
    MO = 1


class Verdict(enum.Enum):
    ADMIT = "Admit"
    OFFLOAD = "Offload"


class Source(enum.Enum):
    RULE_FILTER = "RuleFilter"
    CORRECTION_INDEX = "CorrectionIndex"
    MODEL = "Model"
    QUOTA_CLAMP = "QuotaClamp"


class Observed(enum.Enum):
    MO_FAILED = "MOFailed"
    SUCCEEDED = "Succeeded"


class OutcomeClass(enum.Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


# Table-2 feature groups, in index order.
DEFAULT_GROUPS = (
    ("operator-count", 23),
    ("operator-cardinality", 104),
    ("memory-intensive", 19),
    ("execution-config", 2),
    ("resource-metrics", 8),
    ("cluster-config", 6),
    ("oom-indicator", 1),
)
QUERY_LEVEL_GROUPS = ("operator-count", "operator-cardinality", "memory-intensive", "execution-config")


@dataclass(frozen=True)
class FeatureSchema:
    """Feature layout: dimension plus named, contiguous index ranges."""

    dimension: int = DEFAULT_DIMENSION
    groups: tuple[tuple[str, range], ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        groups = self.groups
        if groups is None:
            if self.dimension != DEFAULT_DIMENSION:
                groups = (("all", range(0, self.dimension)),)
            else:
                groups, start = [], 0
                for name, width in DEFAULT_GROUPS:
                    groups.append((name, range(start, start + width)))
                    start += width
        groups = tuple((str(name), range(r.start, r.stop)) for name, r in groups)
        expected = 0
        for name, r in groups:
            if r.start != expected or r.stop <= r.start:
                raise ValueError(f"group {name!r} does not continue the partition at index {expected}")
            expected = r.stop
        if expected != self.dimension:
            raise ValueError(f"groups cover [0, {expected}) but dimension is {self.dimension}")
        object.__setattr__(self, "groups", groups)

    def group(self, name: str) -> range:
        for g, r in self.groups:
            if g == name:
                return r
        raise KeyError(name)

    def has_group(self, name: str) -> bool:
        return any(g == name for g, _ in self.groups)

    @property
    def query_level_range(self) -> range:
        idx = [r for g, r in self.groups if g in QUERY_LEVEL_GROUPS]
        if not idx:
            return range(0, 0)
        return range(idx[0].start, idx[-1].stop)

    @property
    def cluster_level_range(self) -> range:
        q = self.query_level_range
        return range(q.stop, self.dimension)

    def group_of(self, index: int) -> str:
        for g, r in self.groups:
            if index in r:
                return g
        raise IndexError(index)


def feature_vector(values, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    """Validate and freeze a feature vector (read-only float64 array)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != dimension:
        raise DimensionError(f"expected {dimension} features, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise ValueError(f"feature {bad} is not finite: {arr[bad]!r}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, slots=True)
class QueryRecord:
    query_id: str
    arrival_ms: int
    cluster_id: str
    features: np.ndarray
    cpu_time_s: float
    label: Label

    def __post_init__(self):
        if self.arrival_ms < 0:
            raise ValueError("arrival_ms must be >= 0")
        if not (self.cpu_time_s >= 0 and math.isfinite(self.cpu_time_s)):
            raise ValueError("cpu_time_s must be finite and >= 0")

    @property
    def is_mo(self) -> bool:
        return self.label == Label.MO


@dataclass(frozen=True, slots=True)
class Decision:
    verdict: Verdict
    source: Source
    confidence: float
    quota_cost_charged: float = 0.0

    def __post_init__(self):
        if self.verdict is Verdict.ADMIT and self.quota_cost_charged != 0:
            raise ValueError("Admit decisions never charge quota")
        if self.source is Source.RULE_FILTER and self.verdict is not Verdict.ADMIT:
            raise ValueError("the rule filter only emits negatives")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.quota_cost_charged < 0:
            raise ValueError("negative quota cost")


@dataclass(frozen=True, slots=True)
class Outcome:
    query_id: str
    observed: Observed
    completed_ms: int


def classify_outcome(decision: Decision | Verdict, label: Label) -> OutcomeClass:
    verdict = decision.verdict if isinstance(decision, Decision) else decision
    positive = verdict is Verdict.OFFLOAD
    if label == Label.MO:
        return OutcomeClass.TP if positive else OutcomeClass.FN
    return OutcomeClass.FP if positive else OutcomeClass.TN


class Trace:
    """Columnar, arrival-ordered collection of query records.

    Behaves as a read-only sequence of :class:`QueryRecord`; the feature
    matrix is kept whole so batch consumers (training, vectorized scoring)
    avoid per-record copies.
    """

    def __init__(self, query_ids, arrival_ms, cluster_ids, labels, cpu_time_s, features):
        self.query_ids = list(query_ids)
        self.cluster_ids = list(cluster_ids)
        self.arrival_ms = np.asarray(arrival_ms, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.cpu_time_s = np.asarray(cpu_time_s, dtype=np.float64)
        feats = np.array(features, dtype=np.float64, copy=True)
        n = len(self.query_ids)
        if feats.size == 0 and feats.ndim != 2:
            feats = np.zeros((n, 0))
        if feats.ndim != 2 or feats.shape[0] != n:
            raise DimensionError(f"feature matrix shape {feats.shape} does not match {n} records")
        for name, col in (("arrival_ms", self.arrival_ms), ("labels", self.labels), ("cpu_time_s", self.cpu_time_s)):
            if col.shape != (n,):
                raise ValueError(f"{name} has shape {col.shape}, expected ({n},)")
        if len(self.cluster_ids) != n:
            raise ValueError("cluster_ids length mismatch")
        feats.flags.writeable = False
        self.features = feats
        self._records: list[QueryRecord] | None = None
        self._groups: dict[str, np.ndarray] | None = None

    @classmethod
    def from_records(cls, records, dimension: int | None = None) -> "Trace":
        records = list(records)
        if not records:
            return cls([], [], [], [], [], np.zeros((0, dimension or DEFAULT_DIMENSION)))
        return cls(
            [r.query_id for r in records],
            [r.arrival_ms for r in records],
            [r.cluster_id for r in records],
            [int(r.label) for r in records],
            [r.cpu_time_s for r in records],
            np.vstack([r.features for r in records]),
        )

    @property
    def dimension(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.query_ids)

    def _build(self, i: int) -> QueryRecord:
        return QueryRecord(
            self.query_ids[i], int(self.arrival_ms[i]), self.cluster_ids[i],
            self.features[i], float(self.cpu_time_s[i]), Label(int(self.labels[i])),
        )

    def records(self) -> list[QueryRecord]:
        if self._records is None:
            self._records = [self._build(i) for i in range(len(self))]
        return self._records

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(range(len(self))[i])
        return self.records()[i]

    def __iter__(self):
        return iter(self.records())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.query_ids == other.query_ids
            and self.cluster_ids == other.cluster_ids
            and np.array_equal(self.arrival_ms, other.arrival_ms)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.cpu_time_s, other.cpu_time_s)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
        )

    def subset(self, index) -> "Trace":
        idx = np.asarray(index)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return Trace(
            [self.query_ids[i] for i in idx],
            self.arrival_ms[idx],
            [self.cluster_ids[i] for i in idx],
            self.labels[idx],
            self.cpu_time_s[idx],
            self.features[idx],
        )

    def mask(self, mask) -> "Trace":
        return self.subset(np.flatnonzero(np.asarray(mask, dtype=bool)))

    @property
    def mo_count(self) -> int:
        return int(self.labels.sum())

    def cluster_index(self) -> dict[str, np.ndarray]:
        """Row indices per cluster, in first-appearance order."""
        if self._groups is None:
            groups: dict[str, list[int]] = {}
            for i, c in enumerate(self.cluster_ids):
                groups.setdefault(c, []).append(i)
            self._groups = {c: np.asarray(v, dtype=np.int64) for c, v in groups.items()}
            for v in self._groups.values():
                v.flags.writeable = False
        return dict(self._groups)

    def mo_counts_by_cluster(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for c, y in zip(self.cluster_ids, self.labels):
            counts[c] = counts.get(c, 0) + int(y)
        return counts


def fmt_float(x: float) -> str:
    """Shortest round-trip decimal text; integral values drop the ``.0``."""
    r = repr(float(x))
    if r.endswith(".0"):
        r = r[:-2]
    return r


def unique_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(first, inverse)`` such that ``X[first][inverse]`` equals ``X`` exactly.

    Rows are keyed by a fixed random projection, which is cheap to sort; the
    grouping is then checked bytewise and an exact sort is used if two
    distinct rows ever shared a key.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    proj = np.random.default_rng(0x5eed).standard_normal(X.shape[1])
    key = X @ proj
    _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if not np.array_equal(X[first][inverse], X):
        rows = X.view(np.dtype((np.void, X.dtype.itemsize * X.shape[1]))).ravel()
        _, first, inverse = np.unique(rows, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
    return first, inverse
