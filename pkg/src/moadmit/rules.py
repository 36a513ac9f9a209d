"""Threshold rules: candidate library, base-rule selection, AND/OR combination search.

A rule evaluating to True means "potential MO, forward to the model"; False
means the query is filtered as a negative.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import AdmitError, FeatureSchema, fmt_float

CANDIDATE_GROUPS = ("operator-count", "operator-cardinality", "oom-indicator")
MAX_LEAVES = 4
POSITIVE_RETENTION_TARGET = 0.95
NEGATIVE_RETENTION_CEILING = 0.03


class NoPositives(AdmitError):
    pass


class NoNegatives(AdmitError):
    pass


class RuleParseError(AdmitError):
    pass


@dataclass(frozen=True, order=True)
class SingleFeatureRule:
    feature_index: int
    threshold: float

    def __str__(self):
        return f"GT({self.feature_index},{fmt_float(self.threshold)})"

    def matches(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X)[..., self.feature_index] > self.threshold


@dataclass(frozen=True)
class RuleNode:
    """Internal AND/OR node; children are RuleNode or SingleFeatureRule."""

    op: str
    children: tuple

    def __post_init__(self):
        if self.op not in ("AND", "OR"):
            raise ValueError(f"unknown connective {self.op!r}")
        if len(self.children) < 2:
            raise ValueError("connectives need at least two operands")

    def __str__(self):
        return f"{self.op}({','.join(str(c) for c in self.children)})"


class DiscriminativeRule:
    """AND/OR expression over at most four `>` predicates (no negation)."""

    def __init__(self, root):
        self.root = flatten(root)
        n = len(list(iter_leaves(self.root)))
        if not 1 <= n <= MAX_LEAVES:
            raise ValueError(f"rule has {n} leaves; allowed 1..{MAX_LEAVES}")

    @classmethod
    def parse(cls, text: str) -> "DiscriminativeRule":
        return cls(parse_expression(text))

    @property
    def leaves(self) -> list[SingleFeatureRule]:
        return list(iter_leaves(self.root))

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def max_feature_index(self) -> int:
        return max(leaf.feature_index for leaf in self.leaves)

    def __str__(self):
        return str(self.root)

    def __repr__(self):
        return f"DiscriminativeRule({self})"

    def __eq__(self, other):
        return isinstance(other, DiscriminativeRule) and str(self) == str(other)

    def __hash__(self):
        return hash(str(self))

    @cached_property
    def _fn(self):
        # compiled once; ~10x faster than walking the tree per record
        src = "lambda v: " + _to_python(self.root)
        return eval(src, {"__builtins__": {}})  # noqa: S307 - source built from validated ints/floats

    def __call__(self, features) -> bool:
        return bool(self._fn(features))

    def evaluate_matrix(self, X: np.ndarray) -> np.ndarray:
        return _eval_matrix(self.root, np.asarray(X))


def _to_python(node) -> str:
    if isinstance(node, SingleFeatureRule):
        return f"(v[{int(node.feature_index)}] > {float(node.threshold)!r})"
    joiner = " and " if node.op == "AND" else " or "
    return "(" + joiner.join(_to_python(c) for c in node.children) + ")"


def _eval_matrix(node, X):
    if isinstance(node, SingleFeatureRule):
        return X[:, node.feature_index] > node.threshold
    parts = [_eval_matrix(c, X) for c in node.children]
    fn = np.logical_and if node.op == "AND" else np.logical_or
    return fn.reduce(parts)


def iter_leaves(node):
    if isinstance(node, SingleFeatureRule):
        yield node
    else:
        for c in node.children:
            yield from iter_leaves(c)


def flatten(node):
    """Merge nested same-op nodes and drop duplicate operands (AND(r, r) == r)."""
    if isinstance(node, SingleFeatureRule):
        return node
    kids = []
    for c in node.children:
        c = flatten(c)
        if isinstance(c, RuleNode) and c.op == node.op:
            kids.extend(c.children)
        else:
            kids.append(c)
    seen, unique = set(), []
    for c in kids:
        key = str(c)
        if key not in seen:
            seen.add(key)
            unique.append(c)
    if len(unique) == 1:
        return unique[0]
    return RuleNode(node.op, tuple(unique))


def canonical(node):
    """Flattened form with operands sorted by serialized text."""
    node = flatten(node)
    if isinstance(node, SingleFeatureRule):
        return node
    kids = sorted((canonical(c) for c in node.children), key=str)
    return RuleNode(node.op, tuple(kids))


_TOKEN = re.compile(r"\s*(AND|OR|GT|\(|\)|,|[-+0-9.eEinfa]+)")


def parse_expression(text: str):
    tokens, pos, text = [], 0, text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise RuleParseError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        tokens.append(m.group(1))
        pos = m.end()

    i = 0

    def expect(tok):
        nonlocal i
        if i >= len(tokens) or tokens[i] != tok:
            got = tokens[i] if i < len(tokens) else "end of input"
            raise RuleParseError(f"expected {tok!r}, got {got!r}")
        i += 1

    def node():
        nonlocal i
        if i >= len(tokens):
            raise RuleParseError("unexpected end of input")
        head = tokens[i]
        i += 1
        expect("(")
        if head == "GT":
            try:
                feat = int(tokens[i])
                i += 1
                expect(",")
                thr = float(tokens[i])
                i += 1
            except (ValueError, IndexError) as exc:
                raise RuleParseError(f"malformed predicate near token {i}") from exc
            expect(")")
            if feat < 0 or not np.isfinite(thr):
                raise RuleParseError("predicate needs a nonnegative index and finite threshold")
            return SingleFeatureRule(feat, thr)
        if head not in ("AND", "OR"):
            raise RuleParseError(f"unknown head {head!r}")
        kids = [node()]
        while i < len(tokens) and tokens[i] == ",":
            i += 1
            kids.append(node())
        expect(")")
        try:
            return RuleNode(head, tuple(kids))
        except ValueError as exc:
            raise RuleParseError(str(exc)) from exc

    root = node()
    if i != len(tokens):
        raise RuleParseError(f"trailing input after token {i}")
    return root


def eval_rule(rule: DiscriminativeRule, features) -> bool:
    return rule(features)


@dataclass(frozen=True)
class RuleStats:
    positive_retention: float
    negative_retention: float
    degenerate: bool = False


def _retention(matched: np.ndarray, labels: np.ndarray) -> RuleStats:
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    pr = float(matched[pos].sum()) / n_pos if n_pos else 1.0
    nr = float(matched[~pos].sum()) / n_neg if n_neg else 1.0
    return RuleStats(pr, nr, degenerate=(n_pos == 0 or n_neg == 0))


def rule_stats(rule, X: np.ndarray, labels) -> RuleStats:
    """Fraction of MO and non-MO rows the rule keeps.

    A class absent from the sample reports retention 1.0 and sets ``degenerate``.
    """
    if isinstance(rule, SingleFeatureRule):
        matched = rule.matches(X)
    else:
        matched = rule.evaluate_matrix(X)
    return _retention(np.asarray(matched, dtype=bool), np.asarray(labels))


def build_candidate_rules(X: np.ndarray, labels, schema: FeatureSchema,
                          groups=CANDIDATE_GROUPS) -> list[SingleFeatureRule]:
    X = np.asarray(X)
    labels = np.asarray(labels)
    pos = X[labels == 1]
    if pos.shape[0] == 0:
        raise NoPositives("candidate thresholds come from MO samples; none present")
    out = []
    for g in groups:
        if not schema.has_group(g):
            continue
        for f in schema.group(g):
            values = np.unique(np.concatenate([pos[:, f], [0.0]]))
            out.extend(SingleFeatureRule(f, float(t)) for t in values)
    return out


def candidate_stats(candidates, X: np.ndarray, labels) -> dict[SingleFeatureRule, RuleStats]:
    """rule_stats for many single-feature rules, one sort per feature column."""
    X = np.asarray(X)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    degenerate = n_pos == 0 or n_neg == 0
    by_feature: dict[int, list[SingleFeatureRule]] = {}
    for c in candidates:
        by_feature.setdefault(c.feature_index, []).append(c)
    out = {}
    for f, rules in by_feature.items():
        thr = np.array([c.threshold for c in rules])
        col_p = np.sort(X[pos, f])
        col_n = np.sort(X[~pos, f])
        kept_p = n_pos - np.searchsorted(col_p, thr, side="right")
        kept_n = n_neg - np.searchsorted(col_n, thr, side="right")
        for c, kp, kn in zip(rules, kept_p.tolist(), kept_n.tolist()):
            out[c] = RuleStats(float(kp) / n_pos if n_pos else 1.0,
                               float(kn) / n_neg if n_neg else 1.0, degenerate)
    return out


@dataclass(frozen=True)
class BaseRuleSelection:
    rules: tuple[SingleFeatureRule, ...]
    stats: tuple[RuleStats, ...]
    relaxed: tuple[bool, ...]


def select_base_rules(candidates, X, labels, schema: FeatureSchema,
                      groups=CANDIDATE_GROUPS,
                      positive_target: float = POSITIVE_RETENTION_TARGET,
                      negative_ceiling: float = NEGATIVE_RETENTION_CEILING) -> BaseRuleSelection:
    """One high-retention rule per feature group plus one high-precision rule."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate rules")
    X = np.asarray(X)
    labels = np.asarray(labels)
    if not np.any(labels == 1):
        raise NoPositives("no MO samples")
    stats = candidate_stats(candidates, X, labels)

    def retention_key(c):
        s = stats[c]
        return (s.negative_retention, c.feature_index, c.threshold)

    def fallback_key(c):
        s = stats[c]
        return (-s.positive_retention, s.negative_retention, c.feature_index, c.threshold)

    chosen, relaxed = [], []
    for g in groups:
        if not schema.has_group(g):
            continue
        members = [c for c in candidates if schema.group_of(c.feature_index) == g]
        if not members:
            continue
        ok = [c for c in members if stats[c].positive_retention >= positive_target]
        if ok:
            chosen.append(min(ok, key=retention_key))
            relaxed.append(False)
        else:
            chosen.append(min(members, key=fallback_key))
            relaxed.append(True)

    precise = [c for c in candidates if stats[c].negative_retention < negative_ceiling]
    if precise:
        chosen.append(min(precise, key=fallback_key))
        relaxed.append(False)
    else:
        chosen.append(min(candidates, key=lambda c: (stats[c].negative_retention, -stats[c].positive_retention,
                                                     c.feature_index, c.threshold)))
        relaxed.append(True)
    return BaseRuleSelection(tuple(chosen), tuple(stats[c] for c in chosen), tuple(relaxed))


def _set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def _read_once_forms(leaves: tuple, top_forbidden: str | None = None):
    """All flattened AND/OR forms using every leaf exactly once."""
    if len(leaves) == 1:
        yield leaves[0]
        return
    for op in ("AND", "OR"):
        if op == top_forbidden:
            continue
        for part in _set_partitions(list(leaves)):
            if len(part) < 2:
                continue
            blocks = [list(_read_once_forms(tuple(b), op)) for b in part]
            for combo in itertools.product(*blocks):
                yield RuleNode(op, tuple(combo))


def enumerate_expressions(base_rules) -> list:
    """Distinct expressions over nonempty subsets of the base rules.

    Duplicate base rules are merged first, so repeated leaves collapse.
    """
    unique = list(dict.fromkeys(base_rules))
    seen, out = set(), []
    for k in range(1, len(unique) + 1):
        for subset in itertools.combinations(unique, k):
            for expr in _read_once_forms(subset):
                c = canonical(expr)
                key = str(c)
                if key not in seen:
                    seen.add(key)
                    out.append(c)
    return out


def objective(stats: RuleStats) -> tuple[float, float]:
    """Lexicographic objective: positive retention first, then non-MO filtering."""
    return (stats.positive_retention, 1.0 - stats.negative_retention)


def combine_rules(base_rules, X_val, y_val):
    """Pick the best expression over the base rules on validation data."""
    X_val = np.asarray(X_val)
    y_val = np.asarray(y_val)
    # predicate outcomes once per base rule; expressions reuse them
    leaf_hits = {r: r.matches(X_val) for r in dict.fromkeys(base_rules)}
    best = None
    for expr in enumerate_expressions(base_rules):
        matched = _eval_cached(expr, leaf_hits)
        s = _retention(matched, y_val)
        n_leaves = len(list(iter_leaves(expr)))
        key = (-s.positive_retention, s.negative_retention, n_leaves, str(expr))
        if best is None or key < best[0]:
            best = (key, expr, s)
    return DiscriminativeRule(best[1]), best[2]


def _eval_cached(node, leaf_hits):
    if isinstance(node, SingleFeatureRule):
        return leaf_hits[node]
    parts = [_eval_cached(c, leaf_hits) for c in node.children]
    fn = np.logical_and if node.op == "AND" else np.logical_or
    return fn.reduce(parts)


@dataclass(frozen=True)
class GeneratedRule:
    rule: DiscriminativeRule
    validation_stats: RuleStats
    base: BaseRuleSelection


def generate_rule(X_train, y_train, X_val, y_val, schema: FeatureSchema,
                  positive_target: float = POSITIVE_RETENTION_TARGET,
                  negative_ceiling: float = NEGATIVE_RETENTION_CEILING) -> GeneratedRule:
    for name, y in (("training", y_train), ("validation", y_val)):
        y = np.asarray(y)
        if not np.any(y == 1):
            raise NoPositives(f"{name} set has no MO samples")
        if not np.any(y == 0):
            raise NoNegatives(f"{name} set has no non-MO samples")
    candidates = build_candidate_rules(X_train, y_train, schema)
    base = select_base_rules(candidates, X_train, y_train, schema,
                             positive_target=positive_target, negative_ceiling=negative_ceiling)
    rule, stats = combine_rules(base.rules, X_val, y_val)
    return GeneratedRule(rule, stats, base)


def validation_split(n: int, fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Temporal split of an arrival-ordered set: last ``fraction`` is validation."""
    cut = n - int(round(n * fraction))
    idx = np.arange(n)
    return idx[:cut], idx[cut:]
