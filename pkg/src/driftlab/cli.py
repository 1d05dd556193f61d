"""Command line interface.

Subcommands: pretrain, run, ablate, gradcheck, serve.
Exit codes: 0 ok, 1 config error, 2 runtime error, 3 validation failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .engine import EpisodeAborted
from .gradcheck import run_gradcheck
from .metrics import write_report
from .oracle import AnnotationExchange
from .presets import PRESET_NAMES, preset_text
from .runner import ablation_table, execute_ablation, execute_run, pretrain_from_config
from .service import AnnotationService, ServiceError
from .snapshots import load as load_snapshot, save as save_snapshot

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VALIDATION = 3


def _load_config(args) -> RunConfig:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("provide exactly one of --config or --preset")
    if args.preset:
        text = preset_text(args.preset)
    else:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text(encoding="utf-8")
    cfg = parse_config(text)
    if args.seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    if args.out is not None:
        cfg = replace(cfg, run=replace(cfg.run, out=args.out))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot_path(cfg: RunConfig) -> Path:
    p = Path(cfg.pretrain.snapshot)
    return p if p.is_absolute() else _out_dir(cfg) / p


def cmd_pretrain(cfg: RunConfig) -> int:
    snap, acc = pretrain_from_config(cfg)
    path = _snapshot_path(cfg)
    save_snapshot(snap, path)
    print(f"snapshot written to {path}")
    print(f"holdout accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    if cfg.oracle.kind == "human":
        print("error: a human oracle needs the annotation service; use "
              "`driftlab serve`", file=sys.stderr)
        return EXIT_CONFIG
    path = _snapshot_path(cfg)
    if not path.exists():
        print(f"error: snapshot {path} not found; run `driftlab pretrain` first",
              file=sys.stderr)
        return EXIT_CONFIG
    snapshot = load_snapshot(path)
    try:
        report = execute_run(cfg, snapshot=snapshot)
    except EpisodeAborted as exc:
        out = _out_dir(cfg)
        write_report(exc.report, out / "report.json", out / "summary.csv")
        print(f"episode aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = _out_dir(cfg)
    write_report(report, out / "report.json", out / "summary.csv")
    print(f"report written to {out / 'report.json'} and {out / 'summary.csv'}")
    print(f"average error: {100 * report.average_error_rate:.2f}%")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    if cfg.ablate is None:
        print("error: config has no [ablate] section", file=sys.stderr)
        return EXIT_CONFIG
    def progress(value, seed):
        print(f"  cell {value} seed {seed} done", flush=True)
    cells = execute_ablation(cfg, progress=progress)
    table = ablation_table(cells)
    out = _out_dir(cfg)
    (out / "ablation.csv").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"summary written to {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials == 0:
        print("warning: 0 trials requested; vacuous pass")
        return EXIT_OK
    result = run_gradcheck(seed=args.seed or 0, trials=args.trials,
                           inject_error=args.inject_error)
    print(f"trials: {result.trials}")
    print(f"max relative error: {result.max_rel_error:.3e}")
    print("PASS" if result.passed else "FAIL")
    return EXIT_OK if result.passed else EXIT_VALIDATION


def cmd_serve(cfg: RunConfig, bind: str) -> int:
    if cfg.oracle.kind != "human":
        print("error: serve requires [oracle] kind = human", file=sys.stderr)
        return EXIT_CONFIG
    path = _snapshot_path(cfg)
    if path.exists():
        snapshot = load_snapshot(path)
    else:
        print("no snapshot found; pretraining first...")
        snapshot, acc = pretrain_from_config(cfg)
        save_snapshot(snapshot, path)
        print(f"holdout accuracy: {acc:.4f}")

    from .runner import engine_config, oracle_from_config, stream_from_config
    from .engine import AdaptationEngine, run_episode

    exchange = AnnotationExchange()
    seed = cfg.run.seed
    engine = AdaptationEngine(snapshot, engine_config(cfg),
                              oracle_from_config(cfg, seed, exchange), seed)
    service = AnnotationService(exchange, engine.oracle.class_names,
                                status_fn=lambda: engine.status)
    try:
        host, port = service.start(bind)
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"annotation service listening on http://{host}:{port}")
    try:
        stream = stream_from_config(cfg, seed)
        echo = serialize_config(cfg)
        report = run_episode(engine, stream, config_echo=echo)
    except EpisodeAborted as exc:
        print(f"episode aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        service.stop()
    out = _out_dir(cfg)
    write_report(report, out / "report.json", out / "summary.csv")
    answered = engine.status["annotations"]
    fallbacks = engine.status["fallbacks"]
    print(f"episode complete: {answered} annotations, {fallbacks} fallbacks")
    print(f"average error: {100 * report.average_error_rate:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftlab",
        description="Active test-time adaptation lab: pretrain a source model, "
                    "stream corrupted batches, adapt online with a one-label "
                    "annotation budget.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="path to a run config file")
        p.add_argument("--preset", choices=PRESET_NAMES,
                       help="use a shipped preset instead of --config")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default=None, help="override [run] out directory")

    add_common(sub.add_parser("pretrain", help="train and snapshot the source model"))
    add_common(sub.add_parser("run", help="run one adaptation episode"))
    add_common(sub.add_parser("ablate", help="run the [ablate] sweep grid"))

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=200)
    g.add_argument("--inject-error", type=float, default=0.0, help=argparse.SUPPRESS)

    s = sub.add_parser("serve", help="run an episode with a live human annotator")
    add_common(s)
    s.add_argument("--bind", default="127.0.0.1:8787", help="host:port to listen on")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = _load_config(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "serve":
            return cmd_serve(cfg, args.bind)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
