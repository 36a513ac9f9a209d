"""Per-cluster quota ledger with entropy- and false-negative-aware costs."""
from __future__ import annotations

import hashlib
import math
from fractions import Fraction
from dataclasses import dataclass, field

from .core import AdmitError, fmt_float


class DomainError(AdmitError, ValueError):
    pass


@dataclass(frozen=True)
class QuotaParams:
    gamma: float = 1.0
    beta: float = 0.5
    c_min: float = 0.1
    daily_multiplier: float = 2.0
    min_daily_quota: float = 5.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.c_min > 0:
            raise ValueError("c_min must be > 0")
        if not self.daily_multiplier > 0:
            raise ValueError("daily_multiplier must be > 0")
        if self.min_daily_quota < 0:
            raise ValueError("min_daily_quota must be >= 0")


def entropy(p: float) -> float:
    """Binary entropy in bits, with 0*log2(0) taken as 0."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability {p} outside [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    q = 1.0 - p
    return -p * math.log2(p) - q * math.log2(q)


def quota_cost(p: float, fnc: int, params: QuotaParams = QuotaParams()) -> float:
    return max(1.0 + params.gamma * entropy(p) - params.beta * fnc, params.c_min)


@dataclass(frozen=True)
class Accepted:
    cost: float


@dataclass(frozen=True)
class Rejected:
    cost_needed: float


@dataclass
class ClusterQuota:
    """Quota state for one cluster.

    Charges accumulate as an exact rational so ``daily_quota - remaining``
    equals the sum of accepted costs with no rounding drift.
    """

    daily_quota: float
    fnc: int = 0
    charged: Fraction = Fraction(0)

    @property
    def remaining_exact(self) -> Fraction:
        return Fraction(self.daily_quota) - self.charged

    @property
    def remaining(self) -> float:
        return float(self.remaining_exact)


@dataclass
class QuotaLedger:
    params: QuotaParams = field(default_factory=QuotaParams)
    clusters: dict[str, ClusterQuota] = field(default_factory=dict)
    auto_initialized: set[str] = field(default_factory=set)

    def _entry(self, cluster_id: str) -> ClusterQuota:
        e = self.clusters.get(cluster_id)
        if e is None:
            # unknown cluster: serve from the floor quota and remember it was not provisioned
            q = self.params.min_daily_quota
            e = self.clusters[cluster_id] = ClusterQuota(q)
            self.auto_initialized.add(cluster_id)
        return e

    def remaining(self, cluster_id: str) -> float:
        return self._entry(cluster_id).remaining

    def fnc(self, cluster_id: str) -> int:
        e = self.clusters.get(cluster_id)
        return e.fnc if e else 0

    def try_accept(self, cluster_id: str, p: float) -> Accepted | Rejected:
        e = self._entry(cluster_id)
        cost = quota_cost(p, e.fnc, self.params)
        if e.remaining_exact >= cost:
            e.charged += Fraction(cost)
            return Accepted(cost)
        return Rejected(cost)

    def record_false_negative(self, cluster_id: str) -> None:
        self._entry(cluster_id).fnc += 1

    def daily_reset(self, prev_day_mo_counts: dict[str, int]) -> None:
        """Re-provision every known cluster plus those in ``prev_day_mo_counts``."""
        for c in set(self.clusters) | set(prev_day_mo_counts):
            n = prev_day_mo_counts.get(c, 0)
            if n < 0:
                raise ValueError(f"negative MO count for cluster {c}")
            q = max(self.params.daily_multiplier * n, self.params.min_daily_quota)
            self.clusters[c] = ClusterQuota(q)
        self.auto_initialized.clear()

    def used(self, cluster_id: str) -> Fraction:
        return self.clusters[cluster_id].charged

    def utilization(self) -> dict[str, float]:
        return {c: float(e.charged) / e.daily_quota if e.daily_quota > 0 else 0.0
                for c, e in sorted(self.clusters.items())}

    def state_digest(self) -> str:
        """Hash of the decision-relevant state (quotas, remaining, FNC), bit-exact."""
        h = hashlib.sha256()
        for c, e in sorted(self.clusters.items()):
            h.update(f"{c}|{e.daily_quota.hex()}|{e.charged}|{e.fnc}\n".encode())
        return h.hexdigest()


def try_accept(ledger: QuotaLedger, cluster_id: str, p: float, params: QuotaParams | None = None):
    if params is not None and params != ledger.params:
        ledger.params = params
    return ledger.try_accept(cluster_id, p)


def record_false_negative(ledger: QuotaLedger, cluster_id: str) -> None:
    ledger.record_false_negative(cluster_id)


def daily_reset(ledger: QuotaLedger, prev_day_mo_counts: dict[str, int], params: QuotaParams | None = None) -> None:
    if params is not None:
        ledger.params = params
    ledger.daily_reset(prev_day_mo_counts)


def params_to_text(params: QuotaParams, prev_day_counts: dict[str, int]) -> str:
    lines = ["moadmit-quota v1"]
    for k in ("gamma", "beta", "c_min", "daily_multiplier", "min_daily_quota"):
        lines.append(f"{k} {fmt_float(getattr(params, k))}")
    lines.append(f"clusters {len(prev_day_counts)}")
    for c in sorted(prev_day_counts):
        lines.append(f"{c} {int(prev_day_counts[c])}")
    return "\n".join(lines) + "\n"


def params_from_text(text: str) -> tuple[QuotaParams, dict[str, int]]:
    lines = text.splitlines()
    if not lines or lines[0] != "moadmit-quota v1":
        raise ValueError("missing quota header")
    vals = {}
    for line in lines[1:6]:
        k, v = line.split()
        vals[k] = float(v)
    params = QuotaParams(**vals)
    k, n = lines[6].split()
    if k != "clusters":
        raise ValueError("expected cluster count line")
    counts = {}
    for line in lines[7:7 + int(n)]:
        c, v = line.split()
        counts[c] = int(v)
    if len(counts) != int(n) or len(lines) != 7 + int(n):
        raise ValueError("cluster count mismatch")
    return params, counts
