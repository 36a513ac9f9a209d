"""Trace CSV files and artifact bundle directories.

Trace rows are ``query_id,arrival_ms,cluster_id,label,cpu_time_s,f0..f{D-1}``
with LF endings, no quoting and shortest round-trip float text, so a
write/read/write cycle is byte-stable.
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AdmitError, DimensionError, FeatureSchema, SchemaMismatch, Trace, fmt_float
from .model import ModelFormatError, TreeEnsemble
from .quota import QuotaParams, params_from_text, params_to_text
from .rules import DiscriminativeRule, RuleParseError

FIXED_COLUMNS = ("query_id", "arrival_ms", "cluster_id", "label", "cpu_time_s")
_ID = re.compile(r"[A-Za-z0-9_-]+\Z")
_INT = re.compile(r"[0-9]+\Z")
_DIGEST = re.compile(r"sha256:[0-9a-f]{64}\Z")


class ParseError(AdmitError):
    def __init__(self, message: str, line: int, column: int | None = None):
        where = f"line {line}" + (f", column {column}" if column is not None else "")
        super().__init__(f"{where}: {message}")
        self.line = line
        self.column = column


class OrderError(AdmitError):
    pass


class CorruptArtifact(AdmitError):
    pass


def header_for(dimension: int) -> str:
    return ",".join(FIXED_COLUMNS + tuple(f"f{i}" for i in range(dimension)))


def _check_order(arrival: np.ndarray, ids: list[str]) -> None:
    for i in range(1, len(ids)):
        a, b = arrival[i - 1], arrival[i]
        if b < a or (b == a and ids[i] <= ids[i - 1]):
            raise OrderError(f"row {i + 2}: ({b}, {ids[i]}) does not follow ({a}, {ids[i - 1]})")


def read_trace(path) -> Trace:
    """Parse and validate a trace file; records come back in file order."""
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    if "\r" in text:
        raise ParseError("CR characters are not allowed (LF line endings only)", 1)
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header", 1)
    header = lines[0].split(",")
    if tuple(header[:5]) != FIXED_COLUMNS:
        raise ParseError(f"header must start with {','.join(FIXED_COLUMNS)}", 1)
    dim = len(header) - 5
    if header[5:] != [f"f{i}" for i in range(dim)]:
        raise ParseError("feature columns must be f0..f{D-1} in order", 1)

    n = len(lines) - 1
    ids, clusters = [], []
    arrival = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int8)
    cpu = np.empty(n, dtype=np.float64)
    feats = np.empty((n, dim), dtype=np.float64)
    for r, line in enumerate(lines[1:]):
        lineno = r + 2
        parts = line.split(",")
        if len(parts) != 5 + dim:
            raise DimensionError(f"line {lineno}: {len(parts) - 5} feature fields, header declares {dim}")
        qid, arr, cid, lab, cpu_s = parts[:5]
        if not _ID.match(qid):
            raise ParseError(f"bad query_id {qid!r}", lineno, 1)
        if not _INT.match(arr):
            raise ParseError(f"bad arrival_ms {arr!r}", lineno, 2)
        if not _ID.match(cid):
            raise ParseError(f"bad cluster_id {cid!r}", lineno, 3)
        if lab not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {lab!r}", lineno, 4)
        c = _parse_float(cpu_s, lineno, 5)
        if c < 0:
            raise ParseError("cpu_time_s must be >= 0", lineno, 5)
        fields = parts[5:]
        if _FEATURE_CHARS.match(line, len(line) - sum(map(len, fields)) - len(fields) + 1):
            try:
                row = np.array(fields, dtype=np.float64)
            except ValueError:
                row = None
        else:
            row = None
        if row is None:
            row = np.array([_parse_float(v, lineno, 6 + j) for j, v in enumerate(fields)])
        if not np.all(np.isfinite(row)):
            j = int(np.flatnonzero(~np.isfinite(row))[0])
            raise ParseError(f"feature f{j} is not finite: {parts[5 + j]!r}", lineno, 6 + j)
        ids.append(qid)
        clusters.append(cid)
        arrival[r] = int(arr)
        labels[r] = int(lab)
        cpu[r] = c
        feats[r] = row
    _check_order(arrival, ids)
    return Trace(ids, arrival, clusters, labels, cpu, feats)


_FEATURE_CHARS = re.compile(r"[0-9eE.,+-]*\Z")
_FLOAT = re.compile(r"-?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][-+]?[0-9]+)?\Z")


def _parse_float(text: str, line: int, column: int) -> float:
    if not _FLOAT.match(text):
        raise ParseError(f"not a decimal number: {text!r}", line, column)
    v = float(text)
    if not math.isfinite(v):
        raise ParseError(f"not finite: {text!r}", line, column)
    return v


def format_trace(trace: Trace) -> str:
    out = [header_for(trace.dimension)]
    for i in range(len(trace)):
        head = (f"{trace.query_ids[i]},{int(trace.arrival_ms[i])},{trace.cluster_ids[i]},"
                f"{int(trace.labels[i])},{fmt_float(trace.cpu_time_s[i])},")
        out.append(head + ",".join(map(fmt_float, trace.features[i].tolist())))
    return "\n".join(out) + "\n"


def write_trace(records, path, dimension: int | None = None) -> None:
    trace = records if isinstance(records, Trace) else Trace.from_records(records, dimension)
    for name in (*trace.query_ids, *trace.cluster_ids):
        if not _ID.match(name):
            raise ValueError(f"identifier {name!r} must match [A-Za-z0-9_-]+")
    _check_order(trace.arrival_ms, trace.query_ids)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trace(trace))


def trace_digest(trace: Trace) -> str:
    """sha256 over the trace's columns (order-sensitive, bit-exact)."""
    h = hashlib.sha256()
    h.update(f"{len(trace)}x{trace.dimension}\n".encode())
    h.update("\n".join(trace.query_ids).encode())
    h.update(b"\0")
    h.update("\n".join(trace.cluster_ids).encode())
    for arr in (trace.arrival_ms, trace.labels, trace.cpu_time_s, trace.features):
        h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return "sha256:" + h.hexdigest()


# -- schema ---------------------------------------------------------------

SCHEMA_HEADER = "moadmit-schema v1"


def schema_to_text(schema: FeatureSchema) -> str:
    lines = [SCHEMA_HEADER, f"dimension {schema.dimension}"]
    lines += [f"group {name} {r.start} {r.stop}" for name, r in schema.groups]
    return "\n".join(lines) + "\n"


def schema_from_text(text: str) -> FeatureSchema:
    lines = text.splitlines()
    if not lines or lines[0] != SCHEMA_HEADER:
        raise CorruptArtifact("schema.txt: missing header")
    try:
        key, dim = lines[1].split()
        if key != "dimension":
            raise ValueError("expected dimension line")
        groups = []
        for line in lines[2:]:
            tag, name, a, b = line.split()
            if tag != "group":
                raise ValueError(f"unexpected line {line!r}")
            groups.append((name, range(int(a), int(b))))
        return FeatureSchema(int(dim), tuple(groups))
    except (ValueError, IndexError) as exc:
        raise CorruptArtifact(f"schema.txt: {exc}") from exc


# -- bundle ---------------------------------------------------------------

@dataclass
class Provenance:
    trace_digest: str
    build_timestamp_ms: int
    seed: int

    def to_text(self) -> str:
        return (f"moadmit-provenance v1\ntrace_digest {self.trace_digest}\n"
                f"build_timestamp_ms {self.build_timestamp_ms}\nseed {self.seed}\n")

    @classmethod
    def from_text(cls, text: str) -> "Provenance":
        lines = text.splitlines()
        if len(lines) != 4 or lines[0] != "moadmit-provenance v1":
            raise CorruptArtifact("provenance.txt: malformed")
        vals = {}
        for line in lines[1:]:
            parts = line.split()
            if len(parts) != 2:
                raise CorruptArtifact(f"provenance.txt: bad line {line!r}")
            vals[parts[0]] = parts[1]
        digest = vals.get("trace_digest", "")
        if not _DIGEST.match(digest):
            raise CorruptArtifact(f"provenance.txt: digest {digest!r} is not sha256:<64 hex>")
        try:
            return cls(digest, int(vals["build_timestamp_ms"]), int(vals["seed"]))
        except (KeyError, ValueError) as exc:
            raise CorruptArtifact(f"provenance.txt: {exc}") from exc


@dataclass
class ArtifactBundle:
    schema: FeatureSchema
    rule: DiscriminativeRule
    global_model: TreeEnsemble
    local_models: dict[str, TreeEnsemble]
    quota_params: QuotaParams
    prev_day_mo_counts: dict[str, int]
    provenance: Provenance
    index_snapshots: dict[str, str] = field(default_factory=dict)


def save_bundle(bundle: ArtifactBundle, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "schema.txt").write_text(schema_to_text(bundle.schema), encoding="utf-8")
    (d / "rule.txt").write_text(f"moadmit-rule v1\n{bundle.rule}\n", encoding="utf-8")
    (d / "global_model.txt").write_text(bundle.global_model.to_text(), encoding="utf-8")
    local_dir = d / "local_models"
    local_dir.mkdir(exist_ok=True)
    for stale in local_dir.glob("*.txt"):
        if stale.stem not in bundle.local_models:
            stale.unlink()
    for cid, m in sorted(bundle.local_models.items()):
        (local_dir / f"{cid}.txt").write_text(m.to_text(), encoding="utf-8")
    (d / "quota.txt").write_text(params_to_text(bundle.quota_params, bundle.prev_day_mo_counts), encoding="utf-8")
    (d / "provenance.txt").write_text(bundle.provenance.to_text(), encoding="utf-8")
    if bundle.index_snapshots:
        idx = d / "index"
        idx.mkdir(exist_ok=True)
        for cid, text in sorted(bundle.index_snapshots.items()):
            (idx / f"{cid}.txt").write_text(text, encoding="utf-8")


def _read(d: Path, name: str) -> str:
    p = d / name
    if not p.is_file():
        raise CorruptArtifact(f"missing {name} in {d}")
    return p.read_text(encoding="utf-8")


def load_bundle(directory, expected_dimension: int | None = None) -> ArtifactBundle:
    d = Path(directory)
    if not d.is_dir():
        raise CorruptArtifact(f"{d} is not a directory")
    schema = schema_from_text(_read(d, "schema.txt"))
    if expected_dimension is not None and schema.dimension != expected_dimension:
        raise SchemaMismatch(f"bundle dimension {schema.dimension} != expected {expected_dimension}")
    rule_lines = _read(d, "rule.txt").splitlines()
    if len(rule_lines) != 2 or rule_lines[0] != "moadmit-rule v1":
        raise CorruptArtifact("rule.txt: malformed")
    try:
        rule = DiscriminativeRule.parse(rule_lines[1])
        global_model = TreeEnsemble.from_text(_read(d, "global_model.txt"))
        local_models = {}
        local_dir = d / "local_models"
        if local_dir.is_dir():
            for p in sorted(local_dir.glob("*.txt")):
                local_models[p.stem] = TreeEnsemble.from_text(p.read_text(encoding="utf-8"))
        params, counts = params_from_text(_read(d, "quota.txt"))
    except (RuleParseError, ModelFormatError, ValueError) as exc:
        raise CorruptArtifact(str(exc)) from exc
    provenance = Provenance.from_text(_read(d, "provenance.txt"))
    for name, m in [("global", global_model), *local_models.items()]:
        if m.dimension is not None and m.dimension != schema.dimension:
            raise SchemaMismatch(f"model {name} has dimension {m.dimension}, schema says {schema.dimension}")
        if m.max_feature_index() >= schema.dimension:
            raise CorruptArtifact(f"model {name} splits on a feature outside the schema")
    if rule.max_feature_index() >= schema.dimension:
        raise CorruptArtifact("rule references a feature outside the schema")
    snapshots = {}
    if (d / "index").is_dir():
        for p in sorted((d / "index").glob("*.txt")):
            snapshots[p.stem] = p.read_text(encoding="utf-8")
    return ArtifactBundle(schema, rule, global_model, local_models, params, counts, provenance, snapshots)
