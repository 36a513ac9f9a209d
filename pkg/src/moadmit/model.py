"""Second-order gradient-boosted trees for binary logistic loss, plus the
per-cluster local/global router."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import AdmitError, DimensionError, fmt_float, unique_rows

FORMAT_HEADER = "moadmit-tree-ensemble v1"
AUTO = "auto"
_TIE_RTOL = 1e-12


class SingleClass(AdmitError):
    pass


class ModelFormatError(AdmitError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int = 5
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    positive_class_weight: float | str = AUTO
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.max_depth < 0:
            raise ValueError("rounds and max_depth must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.min_child_weight < 0 or self.reg_lambda < 0:
            raise ValueError("min_child_weight and reg_lambda must be nonnegative")
        w = self.positive_class_weight
        if w != AUTO and not (isinstance(w, (int, float)) and w > 0):
            raise ValueError("positive_class_weight must be 'auto' or a positive number")

    def resolve_weight(self, n_pos: int, n_neg: int) -> float:
        if self.positive_class_weight == AUTO:
            return float(min(max(n_neg / n_pos, 1.0), 1000.0))
        return float(self.positive_class_weight)


def sigmoid(m: float) -> float:
    if m >= 0:
        return 1.0 / (1.0 + math.exp(-m))
    e = math.exp(m)
    return e / (1.0 + e)


class Tree:
    """Binary regression tree in flat arrays; ``feature == -1`` marks a leaf.

    Samples with ``x[feature] <= threshold`` go left.
    """

    __slots__ = ("feature", "threshold", "left", "right", "value", "_arrays")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = list(feature)
        self.threshold = list(threshold)
        self.left = list(left)
        self.right = list(right)
        self.value = list(value)
        self._arrays = None

    def leaf_value(self, v) -> float:
        feature, threshold, left, right = self.feature, self.threshold, self.left, self.right
        i = 0
        while feature[i] >= 0:
            i = left[i] if v[feature[i]] <= threshold[i] else right[i]
        return self.value[i]

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        if self._arrays is None:
            self._arrays = tuple(np.asarray(a) for a in
                                 (self.feature, self.threshold, self.left, self.right, self.value))
        feat, thr, left, right, value = self._arrays
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = feat[node] >= 0
        while active.any():
            f = feat[node[active]]
            go_left = X[rows[active], f] <= thr[node[active]]
            node[active] = np.where(go_left, left[node[active]], right[node[active]])
            active = feat[node] >= 0
        return value[node]

    def depth(self) -> int:
        def d(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def split_features(self) -> set[int]:
        return {f for f in self.feature if f >= 0}

    def preorder_lines(self) -> list[str]:
        out = []

        def walk(i):
            if self.feature[i] < 0:
                out.append(f"leaf({fmt_float(self.value[i])})")
            else:
                out.append(f"({self.feature[i]},{fmt_float(self.threshold[i])})")
                walk(self.left[i])
                walk(self.right[i])
        walk(0)
        return out

    @classmethod
    def from_preorder(cls, lines: list[str]) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []
        pos = 0

        def build():
            nonlocal pos
            if pos >= len(lines):
                raise ModelFormatError("tree ended early")
            line = lines[pos].strip()
            pos += 1
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            try:
                if line.startswith("leaf(") and line.endswith(")"):
                    value[i] = float(line[5:-1])
                    return i
                if line.startswith("(") and line.endswith(")"):
                    f, t = line[1:-1].split(",")
                    feature[i] = int(f)
                    threshold[i] = float(t)
                else:
                    raise ValueError(line)
            except ValueError as exc:
                raise ModelFormatError(f"bad node line {line!r}") from exc
            if feature[i] < 0:
                raise ModelFormatError(f"negative feature index in {line!r}")
            left[i] = build()
            right[i] = build()
            return i

        build()
        if pos != len(lines):
            raise ModelFormatError("extra node lines after tree")
        return cls(feature, threshold, left, right, value)


@njit(cache=True)
def _ensemble_margins(X, base, offsets, feat, thr, left, right, value):
    # same left-to-right accumulation as TreeEnsemble.margin, so results are bitwise equal
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        s = base
        for k in range(offsets.shape[0] - 1):
            o = offsets[k]
            i = 0
            while feat[o + i] >= 0:
                if X[r, feat[o + i]] <= thr[o + i]:
                    i = left[o + i]
                else:
                    i = right[o + i]
            s += value[o + i]
        out[r] = s
    return out


class TreeEnsemble:
    def __init__(self, trees=(), base_score: float = 0.0, dimension: int | None = None):
        self.trees = list(trees)
        self.base_score = float(base_score)
        self.dimension = dimension
        self.loss_history: list[float] = []
        self._pack = None

    def margin(self, features) -> float:
        s = self.base_score
        for t in self.trees:
            s += t.leaf_value(features)
        return s

    def score(self, features) -> float:
        if self.dimension is not None and len(features) != self.dimension:
            raise DimensionError(f"expected {self.dimension} features, got {len(features)}")
        return sigmoid(self.margin(features))

    def _packed(self):
        if self._pack is None or self._pack[0] != len(self.trees):
            offsets = np.cumsum([0] + [len(t.feature) for t in self.trees]).astype(np.int64)
            cat = lambda name, dt: np.array([x for t in self.trees for x in getattr(t, name)], dtype=dt)
            self._pack = (len(self.trees), offsets, cat("feature", np.int64), cat("threshold", np.float64),
                          cat("left", np.int64), cat("right", np.int64), cat("value", np.float64))
        return self._pack[1:]

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if not self.trees:
            return np.full(X.shape[0], self.base_score)
        return _ensemble_margins(X, self.base_score, *self._packed())

    def score_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.dimension is not None and X.shape[1] != self.dimension:
            raise DimensionError(f"expected {self.dimension} features, got {X.shape[1]}")
        # math.exp per element keeps batch scores bitwise equal to score()
        return np.array([sigmoid(m) for m in self.margins(X).tolist()])

    def max_feature_index(self) -> int:
        return max((max(t.split_features(), default=-1) for t in self.trees), default=-1)

    def to_text(self) -> str:
        lines = [FORMAT_HEADER,
                 f"dimension {self.dimension if self.dimension is not None else '-'}",
                 f"base_score {fmt_float(self.base_score)}",
                 f"trees {len(self.trees)}"]
        for i, t in enumerate(self.trees):
            nodes = t.preorder_lines()
            lines.append(f"tree {i} {len(nodes)}")
            lines.extend(nodes)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TreeEnsemble":
        lines = text.splitlines()
        try:
            if not lines or lines[0] != FORMAT_HEADER:
                raise ModelFormatError(f"missing header {FORMAT_HEADER!r}")
            dim_tok = _keyed(lines[1], "dimension")
            dimension = None if dim_tok == "-" else int(dim_tok)
            base = float(_keyed(lines[2], "base_score"))
            n_trees = int(_keyed(lines[3], "trees"))
            trees, pos = [], 4
            for k in range(n_trees):
                head = lines[pos].split()
                if len(head) != 3 or head[0] != "tree" or int(head[1]) != k:
                    raise ModelFormatError(f"bad tree header {lines[pos]!r}")
                n_nodes = int(head[2])
                trees.append(Tree.from_preorder(lines[pos + 1:pos + 1 + n_nodes]))
                pos += 1 + n_nodes
            if pos != len(lines):
                raise ModelFormatError("trailing lines after last tree")
        except (IndexError, ValueError) as exc:
            raise ModelFormatError(str(exc)) from exc
        return cls(trees, base, dimension)

    def __eq__(self, other):
        return isinstance(other, TreeEnsemble) and self.to_text() == other.to_text()


def _keyed(line: str, key: str) -> str:
    parts = line.split()
    if len(parts) != 2 or parts[0] != key:
        raise ModelFormatError(f"expected '{key} <value>', got {line!r}")
    return parts[1]


def logistic_grad_hess(margin: np.ndarray, y: np.ndarray, w: np.ndarray):
    p = 1.0 / (1.0 + np.exp(-margin))
    return w * (p - y), w * p * (1.0 - p)


def weighted_logloss(margin: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # log(1 + e^m) - y*m, computed stably
    return float(np.sum(w * (np.logaddexp(0.0, margin) - y * margin)))


def split_gain(GL, HL, GR, HR, lam):
    G, H = GL + GR, HL + HR
    return GL * GL / (HL + lam) + GR * GR / (HR + lam) - G * G / (H + lam)


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float


@njit(cache=True, error_model="numpy")
def _scan_splits(ranks, sub, g, h, lam, min_child_weight, tie_rtol):
    d, m = sub.shape
    G = 0.0
    H = 0.0
    for k in range(m):
        G += g[sub[0, k]]
        H += h[sub[0, k]]
    parent = G * G / (H + lam)
    best_gain = 0.0
    best_f = -1
    best_pos = -1
    for f in range(d):
        row = sub[f]
        rrow = ranks[f]
        gl = 0.0
        hl = 0.0
        for k in range(m - 1):
            i = row[k]
            gl += g[i]
            hl += h[i]
            if rrow[k] < rrow[k + 1]:
                hr = H - hl
                if hl >= min_child_weight and hr >= min_child_weight:
                    gr = G - gl
                    gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
                    if gain > best_gain + tie_rtol * max(1.0, abs(best_gain)):
                        best_gain = gain
                        best_f = f
                        best_pos = k
    lo_rank = -1
    hi_rank = -1
    if best_f >= 0:
        lo_rank = ranks[best_f, best_pos]
        hi_rank = ranks[best_f, best_pos + 1]
    return best_f, lo_rank, hi_rank, best_gain


@njit(cache=True)
def _partition(sub, ranks, go_left, n_left):
    # stable, branchless: left samples fill [0, n_left), right ones the rest
    d, m = sub.shape
    osub = np.empty((d, m), dtype=sub.dtype)
    orank = np.empty((d, m), dtype=ranks.dtype)
    for f in range(d):
        a = 0
        b = n_left
        for k in range(m):
            i = sub[f, k]
            gl = go_left[i]
            pos = a if gl else b
            osub[f, pos] = i
            orank[f, pos] = ranks[f, k]
            a += gl
            b += 1 - gl
    return osub[:, :n_left], orank[:, :n_left], osub[:, n_left:], orank[:, n_left:]


def _midpoint(lo: float, hi: float) -> float:
    # midpoint between adjacent distinct values; fall back to the left value
    # when rounding would push the midpoint onto the right one
    thr = lo + (hi - lo) * 0.5
    return thr if thr < hi else lo


class _Presorted:
    """Per-feature sample order plus value ranks, the layout split search scans.

    Ranks index each feature's sorted distinct values, so comparisons are
    exact while the arrays stay narrow (uint16 when the sample count allows),
    which roughly thirds the memory traffic of partitioning nodes.
    """

    def __init__(self, X: np.ndarray):
        n, d = X.shape
        dtype = np.uint16 if n <= np.iinfo(np.uint16).max else np.int32
        Xt = np.ascontiguousarray(X.T)
        order = np.argsort(Xt, axis=1, kind="stable")
        sorted_vals = np.take_along_axis(Xt, order, axis=1)
        step = np.ones((d, n), dtype=bool)
        step[:, 1:] = sorted_vals[:, 1:] > sorted_vals[:, :-1]
        self.ranks = (np.cumsum(step, axis=1) - 1).astype(dtype)
        self.order = order.astype(dtype)
        # distinct values per feature, left-aligned; rank r of feature f is table[f, r]
        self.table = np.zeros((d, n))
        for f in range(d):
            u = sorted_vals[f, step[f]]
            self.table[f, :len(u)] = u

    def threshold(self, f: int, lo_rank: int, hi_rank: int) -> float:
        return _midpoint(float(self.table[f, lo_rank]), float(self.table[f, hi_rank]))


def _best_split_ranked(pre: _Presorted, ranks, sub, g, h, lam, min_child_weight) -> Split | None:
    if sub.shape[1] < 2:
        return None
    f, lo, hi, gain = _scan_splits(ranks, sub, g, h, float(lam), float(min_child_weight), _TIE_RTOL)
    if f < 0:
        return None
    return Split(int(f), pre.threshold(int(f), int(lo), int(hi)), float(gain))


def best_split(vals: np.ndarray, sub: np.ndarray, g: np.ndarray, h: np.ndarray,
               lam: float, min_child_weight: float) -> Split | None:
    """Exact greedy split search over presorted sample indices.

    Row ``f`` of ``sub`` lists the node's samples sorted by feature ``f`` and
    row ``f`` of ``vals`` holds the matching feature values. Only splits with positive gain
    qualify; near-ties (1e-12 relative) keep the lowest feature index, then the
    lowest threshold. The threshold is the midpoint of the two values it separates.
    """
    vals = np.asarray(vals, dtype=np.float64)
    sub = np.ascontiguousarray(sub, dtype=np.int64)
    if sub.shape[1] < 2:
        return None
    step = np.ones(vals.shape, dtype=np.int64)
    step[:, 1:] = vals[:, 1:] > vals[:, :-1]
    ranks = np.cumsum(step, axis=1)
    f, lo, hi, gain = _scan_splits(ranks, sub, g, h, float(lam), float(min_child_weight), _TIE_RTOL)
    if f < 0:
        return None
    row = ranks[f]
    lo_v = float(vals[f, np.flatnonzero(row == lo)[0]])
    hi_v = float(vals[f, np.flatnonzero(row == hi)[0]])
    return Split(int(f), _midpoint(lo_v, hi_v), float(gain))


def _grow_tree(X, pre: _Presorted, g, h, cfg: TrainConfig):
    feature, threshold, left, right, value = [], [], [], [], []
    leaf_of = np.empty(X.shape[0], dtype=np.int64)

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), pre.order, pre.ranks, 0)]
    while stack:
        i, sub, ranks, depth = stack.pop()
        split = None
        if depth < cfg.max_depth:
            split = _best_split_ranked(pre, ranks, sub, g, h, cfg.reg_lambda, cfg.min_child_weight)
        if split is None:
            idx = sub[0]
            w = -float(g[idx].sum()) / (float(h[idx].sum()) + cfg.reg_lambda)
            value[i] = cfg.learning_rate * w
            leaf_of[idx] = i
            continue
        feature[i], threshold[i] = split.feature, split.threshold
        go_left = X[:, split.feature] <= split.threshold
        n_left = int(go_left[sub[0]].sum())
        if depth + 1 >= cfg.max_depth:
            # children are leaves; only their sample sets are needed
            sub, ranks = sub[:1], ranks[:1]
        lsub, lrank, rsub, rrank = _partition(sub, ranks, go_left, n_left)
        left[i], right[i] = new_node(), new_node()
        # right pushed first so the left subtree is numbered first
        stack.append((right[i], rsub, rrank, depth + 1))
        stack.append((left[i], lsub, lrank, depth + 1))
    tree = Tree(feature, threshold, left, right, value)
    return tree, np.asarray(value)[leaf_of]


def train(X, y, config: TrainConfig = TrainConfig()) -> TreeEnsemble:
    """Fit a boosted ensemble; deterministic given (X, y, config)."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionError("X must be (n, d) with one label per row")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} MO and {n_neg} non-MO")
    pw = config.resolve_weight(n_pos, n_neg)
    base = math.log(pw * n_pos / n_neg)
    # identical (row, label) pairs always share a leaf, so fit each once with its
    # multiplicity folded into the weight; gradients and hessians scale linearly
    first, inverse = unique_rows(np.column_stack([X, y]))
    counts = np.bincount(inverse, minlength=len(first))
    X, y = X[first], y[first]
    w = counts * np.where(y == 1, pw, 1.0)
    pre = _Presorted(X)
    margin = np.full(X.shape[0], base)
    ens = TreeEnsemble([], base, X.shape[1])
    ens.loss_history.append(weighted_logloss(margin, y, w))
    for _ in range(config.rounds):
        g, h = logistic_grad_hess(margin, y, w)
        tree, contrib = _grow_tree(X, pre, g, h, config)
        ens.trees.append(tree)
        margin = margin + contrib
        ens.loss_history.append(weighted_logloss(margin, y, w))
    return ens


def score(ensemble: TreeEnsemble, features) -> float:
    return ensemble.score(features)


@dataclass
class HybridRouter:
    global_model: TreeEnsemble
    locals: dict[str, TreeEnsemble] = field(default_factory=dict)
    local_threshold: int = 100
    fallbacks: dict[str, str] = field(default_factory=dict)

    def model_for(self, cluster_id: str, use_locals: bool = True) -> TreeEnsemble:
        if use_locals:
            m = self.locals.get(cluster_id)
            if m is not None:
                return m
        return self.global_model

    def route_score(self, cluster_id: str, features, use_locals: bool = True) -> float:
        return self.model_for(cluster_id, use_locals).score(features)


def train_hybrid(X, y, clusters, config: TrainConfig = TrainConfig(), local_threshold: int = 100) -> HybridRouter:
    """Global model on everything; a local model per cluster with more than
    ``local_threshold`` MO samples. A cluster whose local fit fails keeps the
    global model and is listed in ``fallbacks``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    clusters = list(clusters)
    router = HybridRouter(train(X, y, config), {}, local_threshold)
    by_cluster: dict[str, list[int]] = {}
    for i, c in enumerate(clusters):
        by_cluster.setdefault(c, []).append(i)
    for c in sorted(by_cluster):
        idx = np.asarray(by_cluster[c])
        if int((y[idx] == 1).sum()) > local_threshold:
            try:
                router.locals[c] = train(X[idx], y[idx], config)
            except SingleClass as exc:
                router.fallbacks[c] = str(exc)
    return router


def route_score(router: HybridRouter, cluster_id: str, features) -> float:
    return router.route_score(cluster_id, features)
