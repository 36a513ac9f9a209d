"""Command-line entry point: gen, build, replay, ablate, sweep, report, describe."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import AdmitError
from .model import TrainConfig
from .pipeline import BuildConfig, Toggles, build_pipeline
from .quota import QuotaParams
from .sim import CostModel, metrics_table, replay, report_from_log, run_ablation, sweep_params
from .traceio import load_bundle, read_trace, save_bundle, write_trace
from .workloadgen import GenConfig, describe, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _quota_args(p):
    d = QuotaParams()
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--c-min", type=float, default=d.c_min)
    p.add_argument("--daily-multiplier", type=float, default=d.daily_multiplier)
    p.add_argument("--min-daily-quota", type=float, default=d.min_daily_quota)


def _build_args(p, quota: bool = True):
    p.add_argument("--rounds", type=int, default=TrainConfig.rounds)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--max-depth", type=int, default=TrainConfig.max_depth)
    p.add_argument("--local-threshold", type=int, default=100)
    if quota:
        _quota_args(p)


def _cost_args(p):
    d = CostModel()
    p.add_argument("--provisioned-rate", type=float, default=d.provisioned_rate)
    p.add_argument("--serverless-rate", type=float, default=d.serverless_rate)
    p.add_argument("--allowance", type=float, default=d.free_serverless_allowance)
    p.add_argument("--feedback", choices=("completion", "immediate"), default="completion")


def make_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="key = value file; command-line flags win")

    parser = _Parser(prog="moadmit", description="MO-query admission control experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    g = subs["gen"] = sub.add_parser("gen", parents=[common], help="generate synthetic daily traces")
    d = GenConfig()
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--clusters", type=int, default=d.n_clusters)
    g.add_argument("--per-cluster", type=int, default=d.queries_per_cluster)
    g.add_argument("--mo-ratio", type=float, default=d.mo_ratio)
    g.add_argument("--repeat-rate", type=float, default=d.repeat_rate)
    g.add_argument("--group-size", type=int, default=d.mo_group_size)
    g.add_argument("--hard-neg", type=float, default=d.hard_negative_rate)
    g.add_argument("--days", type=int, default=d.days)

    b = subs["build"] = sub.add_parser("build", parents=[common], help="build an artifact bundle from a trace")
    b.add_argument("--trace", type=Path, required=True)
    b.add_argument("--out", type=Path, required=True)
    _build_args(b)

    r = subs["replay"] = sub.add_parser("replay", parents=[common], help="replay a trace through a bundle")
    r.add_argument("--bundle", type=Path, required=True)
    r.add_argument("--trace", type=Path, required=True)
    r.add_argument("--out", type=Path, help="directory for report.txt and decisions.csv")
    for name in ("rule", "correction", "locals", "quota"):
        r.add_argument(f"--no-{name}", action="store_true")
    _quota_args(r)
    _cost_args(r)

    a = subs["ablate"] = sub.add_parser("ablate", parents=[common], help="single-component ablation table")
    a.add_argument("--train", type=Path, required=True)
    a.add_argument("--test", type=Path, required=True)
    a.add_argument("--bundle", type=Path, help="reuse a built bundle instead of training")
    a.add_argument("--out", type=Path)
    _build_args(a)
    _cost_args(a)

    s = subs["sweep"] = sub.add_parser("sweep", parents=[common], help="gamma/beta sensitivity grid")
    s.add_argument("--train", type=Path, required=True)
    s.add_argument("--test", type=Path, required=True)
    s.add_argument("--bundle", type=Path)
    s.add_argument("--gamma", type=_floats, default=[1.0])
    s.add_argument("--beta", type=_floats, default=[0.5])
    s.add_argument("--out", type=Path)
    _build_args(s, quota=False)

    rp = subs["report"] = sub.add_parser("report", parents=[common], help="render decision logs as a table")
    rp.add_argument("logs", type=Path, nargs="+")

    ds = subs["describe"] = sub.add_parser("describe", parents=[common], help="summarize a trace")
    ds.add_argument("--trace", type=Path, required=True)
    return parser, subs


def _read_config(path: Path, sub: argparse.ArgumentParser) -> dict:
    known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    out = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            out[dest] = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                out[dest] = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{n}: bad value for {key!r}: {exc}")
            if action.choices and out[dest] not in action.choices:
                raise UsageError(f"{path}:{n}: {key!r} must be one of {list(action.choices)}")
        # a config value satisfies a required flag
        action.required = False
    return out


def parse_args(argv):
    parser, subs = make_parser()
    # the config file is read before the real parse so it can satisfy required flags
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in subs), None)
    if known.config is not None and command is not None:
        if not known.config.is_file():
            raise UsageError(f"config file {known.config} not found")
        subs[command].set_defaults(**_read_config(known.config, subs[command]))
    return parser.parse_args(argv)


def _build_config(args) -> BuildConfig:
    train = TrainConfig(rounds=args.rounds, learning_rate=args.learning_rate, max_depth=args.max_depth,
                        seed=args.seed)
    quota = _quota(args) if hasattr(args, "c_min") else QuotaParams()
    return BuildConfig(train=train, local_threshold=args.local_threshold, quota=quota, seed=args.seed)


def _quota(args) -> QuotaParams:
    return QuotaParams(args.gamma, args.beta, args.c_min, args.daily_multiplier, args.min_daily_quota)


def _cost(args) -> CostModel:
    return CostModel(args.provisioned_rate, args.serverless_rate, args.allowance)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


def _bundle_or_build(args, train_trace):
    if args.bundle is not None:
        return load_bundle(args.bundle, train_trace.dimension)
    return build_pipeline(train_trace, config=_build_config(args))


def cmd_gen(args) -> None:
    cfg = GenConfig(seed=args.seed, n_clusters=args.clusters, queries_per_cluster=args.per_cluster,
                    mo_ratio=args.mo_ratio, repeat_rate=args.repeat_rate, mo_group_size=args.group_size,
                    hard_negative_rate=args.hard_neg, days=args.days)
    args.out.mkdir(parents=True, exist_ok=True)
    for d, trace in enumerate(generate(cfg), 1):
        path = args.out / f"day{d}.csv"
        write_trace(trace, path)
        print(path)


def cmd_build(args) -> None:
    trace = read_trace(args.trace)
    bundle = build_pipeline(trace, config=_build_config(args))
    save_bundle(bundle, args.out)
    print(f"rule {bundle.rule}")
    print(f"local_models {len(bundle.local_models)} {' '.join(sorted(bundle.local_models))}".rstrip())


def cmd_replay(args) -> None:
    trace = read_trace(args.trace)
    bundle = load_bundle(args.bundle, trace.dimension)
    toggles = Toggles(not args.no_rule, not args.no_correction, not args.no_locals, not args.no_quota)
    report = replay(trace, bundle, _cost(args), toggles, args.seed, args.feedback, params=_quota(args))
    if args.out is None:
        sys.stdout.write(report.to_text())
    else:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.txt").write_text(report.to_text(), encoding="utf-8")
        (args.out / "decisions.csv").write_text(report.log_csv(), encoding="utf-8")


def cmd_ablate(args) -> None:
    train, test = read_trace(args.train), read_trace(args.test)
    rows = run_ablation(train, test, cost_model=_cost(args), bundle=_bundle_or_build(args, train),
                        feedback=args.feedback)
    _emit(metrics_table(rows), args.out)


def cmd_sweep(args) -> None:
    train, test = read_trace(args.train), read_trace(args.test)
    bundle = _bundle_or_build(args, train)
    cells = sweep_params(train, test, args.gamma, args.beta, bundle=bundle)
    lines = ["gamma  beta  accepted  precision  recall  f1  accuracy"]
    for g, b, r in cells:
        lines.append(f"{g:g}  {b:g}  {r.quota_accepted}  {r.precision:.4f}  {r.recall:.4f}  {r.f1:.4f}  "
                     f"{r.accuracy:.6f}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_report(args) -> None:
    rows = [(str(p), report_from_log(p.read_text(encoding="utf-8"))) for p in args.logs]
    sys.stdout.write(metrics_table(rows))


def cmd_describe(args) -> None:
    sys.stdout.write(describe(read_trace(args.trace)).to_text())


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "replay": cmd_replay, "ablate": cmd_ablate,
            "sweep": cmd_sweep, "report": cmd_report, "describe": cmd_describe}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (AdmitError, ValueError, OSError, KeyError) as exc:
        print(f"moadmit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
