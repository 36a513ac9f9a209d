"""Seeded synthetic workloads with the regularities the pipeline relies on.

MO queries carry a planted structure: ``(join > 1 OR window > 0) AND
scan_bytes > 1 MiB AND prev_day_oom > 0``. They only occur on a few "hot"
clusters (so some clusters collect enough positives for local models), and
each MO incident is a small group of near-identical retries. Most non-MO
queries fail the planted rule; a configurable slice of "hard negatives"
satisfies it anyway, so the rule alone is imprecise. The OOM indicator is
also raised on a few "cooling" clusters that see no MO queries.

Overloads come from one dominant memory consumer exceeding the cluster's
memory. On most clusters that is the join build; the MO-heaviest cluster
instead overloads on aggregation, sort or window buffers while its join builds
spill safely, a shift only a cluster-local model resolves cleanly. A share of incidents are "transient"
overloads whose features look like ordinary traffic and which only the
correction index can catch on retry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import AdmitError, FeatureSchema, Trace
from .rules import DiscriminativeRule, RuleNode, SingleFeatureRule

DAY_MS = 86_400_000
MIB = 1_048_576.0

# feature layout used by the generator (default 163-dim schema)
JOIN_COUNT = 18
SCAN_BYTES = 52
WINDOW_COUNT = 63
DEMAND = (127, 128, 129, 130)  # join build, agg state, sort, window buffers (MiB)
VARCHAR_KEYS = 131
DOP = 146
BATCH_MODE = 147
QPS = 148
MEM_POOL_UTIL = 149
CPU_UTIL = 150
CORES = 156
MEMORY_GB = 157
RESOURCE_GROUP = 158
NODES = 159
VERSION = 160
STORAGE_TB = 161
PREV_DAY_OOMS = 162

_COUNT_FEATURES = np.array([i for i in range(23) if i != JOIN_COUNT])
_CARD_FEATURES = np.array([i for i in range(23, 127) if i not in (SCAN_BYTES, WINDOW_COUNT)])
_MEM_OTHER = np.arange(132, 146)
_RES_OTHER = np.arange(151, 156)


class ConfigError(AdmitError, ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    n_clusters: int = 20
    queries_per_cluster: int = 10_000
    mo_ratio: float = 0.002
    repeat_rate: float = 0.8
    mo_group_size: int = 3
    hard_negative_rate: float = 0.01
    days: int = 2
    mean_cpu_s_mo: float = 120.0
    mean_cpu_s_non_mo: float = 20.0
    hot_cluster_fraction: float = 0.25
    transient_mo_fraction: float = 0.15
    hidden_mo_fraction: float = 0.06
    group_noise: float = 1e-3

    def __post_init__(self):
        checks = [
            (self.n_clusters >= 1, "n_clusters must be positive"),
            (self.queries_per_cluster >= 1, "queries_per_cluster must be positive"),
            (0.0 < self.mo_ratio < 1.0, "mo_ratio must lie in (0, 1)"),
            (0.0 <= self.repeat_rate <= 1.0, "repeat_rate must lie in [0, 1]"),
            (self.mo_group_size >= 1, "mo_group_size must be >= 1"),
            (0.0 <= self.hard_negative_rate <= 1.0, "hard_negative_rate must lie in [0, 1]"),
            (self.days >= 1, "days must be positive"),
            (self.mean_cpu_s_mo > 0 and self.mean_cpu_s_non_mo > 0, "mean CPU times must be positive"),
            (0.0 < self.hot_cluster_fraction <= 1.0, "hot_cluster_fraction must lie in (0, 1]"),
            (0.0 <= self.transient_mo_fraction <= 1.0, "transient_mo_fraction must lie in [0, 1]"),
            (0.0 <= self.hidden_mo_fraction <= 1.0 - self.transient_mo_fraction,
             "hidden_mo_fraction must lie in [0, 1 - transient_mo_fraction]"),
            (0.0 <= self.group_noise <= 0.005, "group_noise must lie in [0, 0.005]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


def planted_rule() -> DiscriminativeRule:
    return DiscriminativeRule(RuleNode("AND", (
        RuleNode("OR", (SingleFeatureRule(JOIN_COUNT, 1.0), SingleFeatureRule(WINDOW_COUNT, 0.0))),
        SingleFeatureRule(SCAN_BYTES, MIB),
        SingleFeatureRule(PREV_DAY_OOMS, 0.0),
    )))


@dataclass
class _Cluster:
    cid: str
    memory_gb: float
    cores: float
    resource_group: float
    nodes: float
    version: float
    storage_tb: float
    key_demand: int
    hot: bool
    mo_weight: float
    cooling: bool = False
    # typical load; each day drifts a little around it
    qps: float = 100.0
    mem_util: float = 0.45
    cpu_util: float = 0.5
    res_other: tuple = (0.5,) * len(_RES_OTHER)


def _clusters(cfg: GenConfig, rng: np.random.Generator) -> list[_Cluster]:
    n_hot = max(1, int(round(cfg.hot_cluster_fraction * cfg.n_clusters)))
    n_cool = min(int(round(0.1 * cfg.n_clusters)), cfg.n_clusters - n_hot)
    perm = rng.permutation(cfg.n_clusters)
    hot = set(perm[:n_hot].tolist())
    # had OOMs the day before but produce none now
    cooling = set(perm[n_hot:n_hot + n_cool].tolist())
    # skewed MO mass over hot clusters: a few clusters dominate
    ranks = rng.permutation(n_hot)
    weights = 1.0 / (1.0 + ranks) ** 1.3
    weights = weights / weights.sum()
    out, h = [], 0
    for c in range(cfg.n_clusters):
        mem = float(rng.choice([64, 128, 256, 512]))
        is_hot = c in hot
        # the MO-heaviest cluster overloads on its own operator; the rest share join builds
        distinct = is_hot and ranks[h] == 0
        key = int(rng.integers(1, len(DEMAND))) if distinct else 0
        out.append(_Cluster(
            cid=f"c{c:03d}", memory_gb=mem, cores=mem / 4, resource_group=float(rng.integers(1, 9)),
            nodes=float(rng.integers(2, 17)), version=float(rng.integers(3, 6)),
            storage_tb=float(np.round(rng.uniform(1, 50), 1)),
            key_demand=key, hot=is_hot,
            mo_weight=float(weights[h]) if is_hot else 0.0, cooling=c in cooling,
            qps=float(rng.uniform(20, 400)), mem_util=float(rng.uniform(0.3, 0.6)),
            cpu_util=float(rng.uniform(0.2, 0.8)), res_other=tuple(rng.uniform(0.1, 0.9, len(_RES_OTHER))),
        ))
        h += is_hot
    return out


def _saturate(x, cap):
    # smooth ceiling: near-identity for small x, approaches cap without reaching it
    return cap * -np.expm1(-x / cap)


def _lognormal_mean(rng, mean, sigma, size):
    return rng.lognormal(math.log(mean) - sigma * sigma / 2, sigma, size)


class _DayBuilder:
    def __init__(self, cfg: GenConfig, day: int, clusters: list[_Cluster], rng: np.random.Generator,
                 static: dict):
        self.cfg, self.day, self.clusters, self.rng, self.static = cfg, day, clusters, rng, static

    def ordinary(self, cl: _Cluster, m: int, state: dict) -> np.ndarray:
        rng = self.rng
        X = np.zeros((m, 163))
        X[:, _COUNT_FEATURES] = rng.poisson(self.static["count_rates"], size=(m, len(_COUNT_FEATURES)))
        u = rng.random(m)
        X[:, JOIN_COUNT] = np.where(u < 0.85, 0, np.where(u < 0.94, 1, 2 + rng.poisson(1.0, m)))
        X[:, WINDOW_COUNT] = np.where(rng.random(m) < 0.05, 1 + rng.poisson(0.5, m), 0)
        card = np.exp(rng.normal(self.static["card_mu"], 1.5, size=(m, len(_CARD_FEATURES))))
        # an operator absent from the plan has zero cardinality
        X[:, _CARD_FEATURES] = np.where(rng.random(card.shape) < self.static["card_zero"], 0.0, card)
        X[:, SCAN_BYTES] = rng.lognormal(math.log(1e5), 2.74, m)
        mem_mib = cl.memory_gb * 1024
        ratios = _saturate(np.exp(rng.normal(math.log(0.05), 1.2, size=(m, len(DEMAND)))), 0.8)
        k = cl.key_demand
        if k != 0:
            # join builds spill safely here, so large ones are harmless
            ratios[:, 0] = _saturate(np.exp(rng.normal(math.log(0.3), 1.0, m)), 3.0)
        ratios[:, k] = _saturate(np.exp(rng.normal(math.log(0.02), 1.0, m)), 0.8)
        X[:, list(DEMAND)] = ratios * mem_mib
        X[:, VARCHAR_KEYS] = rng.poisson(1.5, m)
        X[:, _MEM_OTHER] = np.exp(rng.normal(self.static["mem_mu"], 1.0, size=(m, len(_MEM_OTHER))))
        X[:, DOP] = rng.integers(1, 65, m)
        X[:, BATCH_MODE] = rng.random(m) < 0.1
        X[:, QPS] = np.maximum(rng.normal(state["qps"], state["qps"] * 0.2, m), 0.0)
        X[:, MEM_POOL_UTIL] = np.clip(rng.normal(state["mem_util"], 0.05, m), 0.0, 1.0)
        X[:, CPU_UTIL] = np.clip(rng.normal(state["cpu_util"], 0.1, m), 0.0, 1.0)
        X[:, _RES_OTHER] = np.clip(rng.normal(state["res_other"], 0.05, size=(m, len(_RES_OTHER))), 0.0, 1.0)
        X[:, CORES] = cl.cores
        X[:, MEMORY_GB] = cl.memory_gb
        X[:, RESOURCE_GROUP] = cl.resource_group
        X[:, NODES] = cl.nodes
        X[:, VERSION] = cl.version
        X[:, STORAGE_TB] = state["storage_tb"]
        X[:, PREV_DAY_OOMS] = state["prev_ooms"]
        return X

    def plant(self, X: np.ndarray) -> np.ndarray:
        """Force the planted MO structure onto rows of ``X`` (in place)."""
        rng, m = self.rng, X.shape[0]
        via_join = rng.random(m) < 0.85
        X[:, JOIN_COUNT] = np.where(via_join, 2 + rng.poisson(1.5, m), 1)
        X[:, WINDOW_COUNT] = np.where(via_join, X[:, WINDOW_COUNT], 1 + rng.poisson(0.5, m))
        # memory-heavy queries scan whole fact tables of fixed size
        X[:, SCAN_BYTES] = rng.choice(self.static["tables"], m)
        return X


def _cluster_state(cl: _Cluster, rng: np.random.Generator) -> dict:
    return {
        "qps": cl.qps * float(np.exp(rng.normal(0, 0.05))),
        "mem_util": cl.mem_util + float(rng.normal(0, 0.01)),
        "cpu_util": cl.cpu_util + float(rng.normal(0, 0.01)),
        "res_other": np.array(cl.res_other) + rng.normal(0, 0.01, len(_RES_OTHER)),
        "storage_tb": cl.storage_tb + float(np.round(rng.uniform(0, 2), 1)),
        "prev_ooms": 1.0 if cl.hot or cl.cooling else 0.0,
    }


def _group_noise(X: np.ndarray, rng, sigma: float) -> np.ndarray:
    """Near-duplicate retry: tiny multiplicative noise on sizes, rare +-1 on counts.

    The scanned table is the same object on retry, so its size is kept.
    """
    Y = X.copy()
    sizes = np.concatenate([_CARD_FEATURES, list(DEMAND), _MEM_OTHER])
    Y[sizes] = X[sizes] * np.exp(rng.normal(0.0, sigma, len(sizes)))
    jitter = (rng.random(len(_COUNT_FEATURES)) < 0.1) * rng.choice([-1, 1], len(_COUNT_FEATURES))
    Y[_COUNT_FEATURES] = np.maximum(X[_COUNT_FEATURES] + jitter, 0)
    Y[QPS] = max(X[QPS] * float(np.exp(rng.normal(0, 0.05))), 0.0)
    Y[MEM_POOL_UTIL] = min(max(X[MEM_POOL_UTIL] + rng.normal(0, 0.01), 0.0), 1.0)
    Y[CPU_UTIL] = min(max(X[CPU_UTIL] + rng.normal(0, 0.01), 0.0), 1.0)
    return Y


def _round(X: np.ndarray) -> np.ndarray:
    # compact traces: 3 decimals for large magnitudes, 6 below one
    return np.where(np.abs(X) >= 1, np.round(X, 3), np.round(X, 6))


def _generate_day(cfg: GenConfig, day: int, clusters: list[_Cluster], static: dict,
                  seed_seq: np.random.SeedSequence) -> Trace:
    rng = np.random.default_rng(seed_seq)
    b = _DayBuilder(cfg, day, clusters, rng, static)
    n_total = cfg.n_clusters * cfg.queries_per_cluster
    g = cfg.mo_group_size
    n_incidents = int(round(cfg.mo_ratio * n_total / g))
    weights = np.array([c.mo_weight for c in clusters])
    # hot clusters fail at a steady daily rate: expected share, stochastically rounded
    share = n_incidents * weights / weights.sum()
    per_cluster = np.floor(share).astype(np.int64) + (rng.random(len(share)) < share % 1.0)
    # no cluster can hold more MO records than queries
    cap = cfg.queries_per_cluster // g
    per_cluster = np.minimum(per_cluster, cap)

    hard_total = int(round(cfg.hard_negative_rate * (n_total - int(per_cluster.sum()) * g)))
    hot_idx = [i for i, c in enumerate(clusters) if c.hot or c.cooling]
    hard_alloc = np.zeros(len(clusters), dtype=np.int64)
    if hard_total and hot_idx:
        hard_alloc[hot_idx] = rng.multinomial(hard_total, np.full(len(hot_idx), 1.0 / len(hot_idx)))

    day_start = day * DAY_MS
    ids, arrivals, cids, labels, cpus, blocks = [], [], [], [], [], []
    for ci, cl in enumerate(clusters):
        state = _cluster_state(cl, rng)
        m = cfg.queries_per_cluster
        n_mo = int(per_cluster[ci]) * g
        n_neg = m - n_mo

        # non-MO traffic: arrivals are uniform over the day; each query is either a
        # fresh original or an exact copy of a uniformly chosen earlier original
        neg_arrival = np.sort(rng.integers(0, DAY_MS, n_neg))
        is_orig = rng.random(n_neg) >= cfg.repeat_rate
        is_orig[:1] = True
        seen = np.cumsum(is_orig)
        n_orig = int(seen[-1]) if n_neg else 0
        Xo = b.ordinary(cl, n_orig, state)
        n_hard = min(int(hard_alloc[ci]), n_orig)
        if n_hard:
            rows = rng.choice(n_orig, n_hard, replace=False)
            Xo[rows] = b.plant(Xo[rows])
        root = np.where(is_orig, seen - 1, (rng.random(n_neg) * seen).astype(np.int64))
        Xn = _round(Xo)[root]
        cpu_n = _lognormal_mean(rng, cfg.mean_cpu_s_non_mo, 1.0, n_orig)[root]

        # MO incidents: a first failure followed by near-identical retries
        n_inc = int(per_cluster[ci])
        Xm = b.ordinary(cl, n_inc, state)
        b.plant(Xm)
        u = rng.random(n_inc)
        hidden = u < cfg.hidden_mo_fraction
        transient = ~hidden & (u < cfg.hidden_mo_fraction + cfg.transient_mo_fraction)
        mem_mib = cl.memory_gb * 1024
        overload = rng.uniform(1.2, 4.0, n_inc) * mem_mib
        k = DEMAND[cl.key_demand]
        Xm[:, k] = np.where(transient | hidden, Xm[:, k], overload)
        # rare failures overload an operator this cluster normally handles fine
        for j in np.flatnonzero(hidden):
            other = [d for d in DEMAND if d != k]
            Xm[j, other[int(rng.integers(len(other)))]] = overload[j]
        # transient failures come from concurrent load saturating the memory pool
        Xm[:, MEM_POOL_UTIL] = np.where(transient, rng.uniform(0.92, 1.0, n_inc), Xm[:, MEM_POOL_UTIL])
        mo_rows, mo_arrival, mo_cpu = [], [], []
        for j in range(n_inc):
            t = int(rng.integers(0, DAY_MS - 3_600_000))
            x = Xm[j]
            for r in range(g):
                cpu = float(_lognormal_mean(rng, cfg.mean_cpu_s_mo, 0.5, 1)[0])
                mo_rows.append(x if r == 0 else _group_noise(x, rng, cfg.group_noise))
                mo_arrival.append(min(t, DAY_MS - 1))
                mo_cpu.append(cpu)
                t += int(round(cpu * 1000)) + int(rng.integers(30_000, 600_000))
        Xmo = _round(np.array(mo_rows).reshape(len(mo_rows), 163))

        arr = np.concatenate([neg_arrival, np.array(mo_arrival, dtype=np.int64)])
        X = np.vstack([Xn, Xmo])
        y = np.concatenate([np.zeros(n_neg, np.int8), np.ones(len(mo_rows), np.int8)])
        cpu_all = np.concatenate([cpu_n, np.array(mo_cpu)])
        blocks.append(X)
        arrivals.append(day_start + arr)
        labels.append(y)
        cpus.append(cpu_all)
        ids.extend(f"d{day}-{cl.cid}-{i:06d}" for i in range(len(y)))
        cids.extend([cl.cid] * len(y))

    X = np.vstack(blocks)
    arrival = np.concatenate(arrivals)
    y = np.concatenate(labels)
    cpu = np.round(np.concatenate(cpus), 3)
    ids_arr = np.array(ids)
    order = np.lexsort((ids_arr, arrival))
    X = X[order]
    return Trace(ids_arr[order].tolist(), arrival[order], [cids[i] for i in order], y[order], cpu[order], X)


def generate(config: GenConfig, schema: FeatureSchema | None = None) -> list[Trace]:
    """One trace per day; identical config (incl. seed) gives identical traces."""
    schema = schema or FeatureSchema()
    if schema.dimension != 163:
        raise ConfigError("the generator emits the default 163-feature layout")
    root = np.random.SeedSequence(config.seed)
    cluster_seq, static_seq, *day_seqs = root.spawn(2 + config.days)
    crng = np.random.default_rng(cluster_seq)
    clusters = _clusters(config, crng)
    srng = np.random.default_rng(static_seq)
    static = {
        "count_rates": srng.uniform(0.1, 3.0, len(_COUNT_FEATURES)),
        "card_mu": srng.uniform(math.log(1e3), math.log(1e6), len(_CARD_FEATURES)),
        "mem_mu": srng.uniform(math.log(10), math.log(1e4), len(_MEM_OTHER)),
        "card_zero": srng.uniform(0.1, 0.7, len(_CARD_FEATURES)),
        "tables": np.array([1.5, 6.0, 24.0, 96.0]) * MIB,
    }
    return [_generate_day(config, d, clusters, static, day_seqs[d]) for d in range(config.days)]


@dataclass
class WorkloadProfile:
    n_records: int
    mo_count: int
    imbalance: str
    repetition_rate: float
    per_cluster_mo: dict[str, int] = field(default_factory=dict)
    per_day_mo: dict[int, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"records {self.n_records}", f"mo {self.mo_count}", f"imbalance {self.imbalance}",
                 f"repetition_rate {self.repetition_rate:.6f}"]
        lines += [f"day {d} mo {n}" for d, n in sorted(self.per_day_mo.items())]
        lines += [f"cluster {c} mo {n}" for c, n in sorted(self.per_cluster_mo.items())]
        return "\n".join(lines) + "\n"


def imbalance_ratio(n_pos: int, n_neg: int) -> str:
    if n_pos == 0:
        return f"0:{n_neg}"
    return f"1:{n_neg / n_pos:.6g}"


def describe(trace: Trace) -> WorkloadProfile:
    n = len(trace)
    mo = trace.mo_count
    seen: set[bytes] = set()
    repeats = 0
    for row in trace.features:
        key = row.tobytes()
        if key in seen:
            repeats += 1
        else:
            seen.add(key)
    per_day: dict[int, int] = {}
    for t, y in zip(trace.arrival_ms.tolist(), trace.labels.tolist()):
        per_day[t // DAY_MS] = per_day.get(t // DAY_MS, 0) + y
    return WorkloadProfile(
        n_records=n, mo_count=mo, imbalance=imbalance_ratio(mo, n - mo),
        repetition_rate=repeats / n if n else 0.0,
        per_cluster_mo=trace.mo_counts_by_cluster(), per_day_mo=per_day,
    )
