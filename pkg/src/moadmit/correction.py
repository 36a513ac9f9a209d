"""Per-cluster exact cosine index over false-negative feature vectors."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, fmt_float

DEFAULT_SIMILARITY = 0.9999


def cosine(a, b) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine of shapes {a.shape} and {b.shape}")
    aa = float(a @ a)
    bb = float(b @ b)
    if aa == 0.0 or bb == 0.0:
        return 0.0
    # sqrt of the product (not product of sqrts) makes self-similarity exactly 1
    return max(-1.0, min(1.0, float(a @ b) / math.sqrt(aa * bb)))


@dataclass(frozen=True)
class Match:
    similarity: float
    features: np.ndarray
    inserted_ms: int
    position: int


class _ClusterStore:
    """Unit-normalized rows kept in a growable matrix, oldest first."""

    def __init__(self, dimension: int):
        self.unit = np.empty((8, dimension))
        self.raw: deque = deque()
        self.stamps: deque = deque()
        self.start = 0
        self.size = 0

    def append(self, v: np.ndarray, unit: np.ndarray, ts: int):
        end = self.start + self.size
        if end == self.unit.shape[0]:
            if self.start > 0:
                self.unit[: self.size] = self.unit[self.start:end]
                self.start = 0
                end = self.size
            if end == self.unit.shape[0]:
                grown = np.empty((self.unit.shape[0] * 2, self.unit.shape[1]))
                grown[: self.size] = self.unit[: self.size]
                self.unit = grown
        self.unit[end] = unit
        self.raw.append(v)
        self.stamps.append(ts)
        self.size += 1

    def pop_oldest(self):
        self.raw.popleft()
        self.stamps.popleft()
        self.start += 1
        self.size -= 1

    def rows(self) -> np.ndarray:
        return self.unit[self.start:self.start + self.size]


class CorrectionIndex:
    def __init__(self, similarity_threshold: float = DEFAULT_SIMILARITY, capacity: int | None = None,
                 dimension: int | None = None):
        if not 0.0 < similarity_threshold <= 1.0:
            raise ValueError("similarity threshold must lie in (0, 1]")
        if capacity is not None and capacity <= 0:
            raise ValueError("capacity must be positive or None for unbounded")
        self.threshold = float(similarity_threshold)
        self.capacity = capacity
        self.dimension = dimension
        self._stores: dict[str, _ClusterStore] = {}
        self.lookups = 0

    def size(self, cluster_id: str | None = None) -> int:
        if cluster_id is None:
            return sum(s.size for s in self._stores.values())
        s = self._stores.get(cluster_id)
        return s.size if s else 0

    def sizes(self) -> dict[str, int]:
        return {c: s.size for c, s in sorted(self._stores.items())}

    def clusters(self) -> list[str]:
        return sorted(self._stores)

    def entries(self, cluster_id: str) -> list[tuple[int, np.ndarray]]:
        s = self._stores.get(cluster_id)
        return list(zip(s.stamps, s.raw)) if s else []

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.dimension is None:
            self.dimension = v.shape[0]
        elif v.shape != (self.dimension,):
            raise DimensionError(f"expected {self.dimension} features, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector must be finite")
        return v

    def insert(self, cluster_id: str, features, timestamp_ms: int) -> None:
        v = self._check(features)
        store = self._stores.get(cluster_id)
        if store is None:
            store = self._stores[cluster_id] = _ClusterStore(v.shape[0])
        n = math.sqrt(float(v @ v))
        store.append(v.copy(), v / n if n > 0 else np.zeros_like(v), int(timestamp_ms))
        if self.capacity is not None and store.size > self.capacity:
            store.pop_oldest()

    def lookup(self, cluster_id: str, features) -> Match | None:
        """Best stored vector for the cluster if its similarity reaches the threshold.

        Exhaustive scan; equal similarities resolve to the earliest insertion.
        """
        self.lookups += 1
        store = self._stores.get(cluster_id)
        if store is None or store.size == 0:
            return None
        q = self._check(features)
        nq = math.sqrt(float(q @ q))
        if nq == 0.0:
            return None
        sims = store.rows() @ (q / nq)
        k = int(np.argmax(sims))  # first maximum == earliest insertion
        if sims[k] < self.threshold - 1e-9:
            return None
        sim = cosine(store.raw[k], q)
        if sim < self.threshold:
            return None
        return Match(sim, store.raw[k], store.stamps[k], k)

    def snapshot_text(self, cluster_id: str) -> str:
        lines = []
        for ts, v in self.entries(cluster_id):
            lines.append(str(ts) + "," + ",".join(fmt_float(x) for x in v))
        return "\n".join(lines) + ("\n" if lines else "")

    def load_snapshot(self, cluster_id: str, text: str) -> None:
        for line in text.splitlines():
            if not line.strip():
                continue
            ts, *vals = line.split(",")
            self.insert(cluster_id, np.array([float(x) for x in vals]), int(ts))


def insert_fn(index: CorrectionIndex, cluster_id: str, features, timestamp_ms: int) -> None:
    index.insert(cluster_id, features, timestamp_ms)


def lookup(index: CorrectionIndex, cluster_id: str, features) -> Match | None:
    return index.lookup(cluster_id, features)
