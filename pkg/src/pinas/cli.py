"""Command-line surface: one subcommand per pipeline stage plus sweeps.

Exit codes: 0 success, 2 configuration error, 3 contract/state violation,
4 numeric failure (including embedding collapse). The only environment
variable consulted is PINAS_DATA_PATH, a fallback for `run.data_path`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .baselines import TrainerMode, apply_mode, run_sweep
from .config import SCHEMA, RunConfig
from .errors import ConfigError, ContractError, NumericError, PinasError
from .pipeline import (
    stage_diagnose,
    stage_linear,
    stage_oracle,
    stage_rank,
    stage_search,
    stage_train_supernet,
)
from .rundir import RunDirectory
from .search import BenchmarkTable


def _add_run(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run", required=True, help="run directory")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (flat key=value lines)")
    p.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="override a config key"
    )


def _build_cfg(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.from_text(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got '{kv}'")
        key, _, value = kv.partition("=")
        cfg.set(key.strip(), value.strip())
    env_path = os.environ.get("PINAS_DATA_PATH")
    if env_path and not cfg.get("run.data_path"):
        cfg.set("run.data_path", env_path)
    return cfg


def _mode(name: str) -> TrainerMode:
    try:
        return TrainerMode(name.replace("-", "_"))
    except ValueError:
        raise ConfigError(
            f"unknown ablation preset '{name}'; "
            f"choose from {', '.join(m.value for m in TrainerMode)}"
        ) from None


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_config(args) -> int:
    cfg = _build_cfg(args)
    lines = cfg.to_text().splitlines()  # one line per SCHEMA key, in order
    if args.tags:
        for key, line in zip(SCHEMA, lines):
            field = SCHEMA[key]
            print(f"# [{field.tag}] {field.help}")
            print(line)
    else:
        sys.stdout.write(cfg.to_text())
    return 0


def cmd_train_supernet(args) -> int:
    run = Path(args.run)
    overridden = bool(args.config or args.set or args.ablation)
    if (run / "config.cfg").exists() and not overridden:
        cfg = RunConfig.from_text((run / "config.cfg").read_text())
    else:
        cfg = _build_cfg(args)
        if args.ablation:
            cfg = apply_mode(cfg, _mode(args.ablation))
    rundir = RunDirectory(run)
    rundir.initialize(cfg)
    with rundir.lock():
        out = stage_train_supernet(rundir, resume=args.resume)
    _emit({"stage": "supernet", **{k: v for k, v in out.items() if k != "final"}})
    return 0


def cmd_linear_eval(args) -> int:
    rundir = RunDirectory(args.run)
    with rundir.lock():
        out = stage_linear(rundir)
    _emit({"stage": "linear", **out})
    return 0


def cmd_search(args) -> int:
    rundir = RunDirectory(args.run)
    with rundir.lock():
        out = stage_search(rundir, budget=args.budget)
    _emit({"stage": "search", **out})
    return 0


def cmd_oracle(args) -> int:
    rundir = RunDirectory(args.run)
    with rundir.lock():
        out = stage_oracle(rundir, archs=args.arch or None)
    _emit({"stage": "oracle", "trained": len(out)})
    return 0


def cmd_rank(args) -> int:
    rundir = RunDirectory(args.run)
    table = BenchmarkTable.load(args.benchmark) if args.benchmark else None
    exclude = tuple(s for s in (args.exclude_ops or "").split(",") if s)
    with rundir.lock():
        out = stage_rank(
            rundir,
            benchmark=table,
            exclude_ops=exclude,
            skip_from=args.skip_from,
            skip_to=args.skip_to,
        )
    _emit({"stage": "rank", **out})
    return 0


def cmd_diagnose(args) -> int:
    rundir = RunDirectory(args.run)
    with rundir.lock():
        out = stage_diagnose(rundir)
    _emit({"stage": "diagnostics", "off_diag_mean": out["off_diag_mean"]})
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_cfg(args)
    modes = tuple(_mode(m) for m in args.modes.split(",")) if args.modes else tuple(TrainerMode)
    outcomes = run_sweep(cfg, args.root, modes)
    for o in outcomes:
        _emit(o.to_json())
    return 0


def cmd_verify_run(args) -> int:
    rundir = RunDirectory(args.run)
    bad = rundir.verify_manifest()
    _emit({"stage": "verify", "mismatched": bad})
    return 0 if not bad else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pinas",
        description="Cross-path consistency supernet training and architecture search.",
        epilog="Exit codes: 0 ok, 2 config error, 3 contract violation, 4 numeric failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="print the effective config")
    _add_config(p)
    p.add_argument("--tags", action="store_true", help="annotate keys with provenance tags")
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("train-supernet", help="train the weight-sharing supernet")
    _add_run(p)
    _add_config(p)
    p.add_argument("--ablation", help="trainer mode preset (e.g. spos, no-negatives)")
    p.add_argument("--resume", action="store_true", help="resume from the checkpoint")
    p.set_defaults(fn=cmd_train_supernet)

    p = sub.add_parser("linear-eval", help="train the linear probe on frozen features")
    _add_run(p)
    p.set_defaults(fn=cmd_linear_eval)

    p = sub.add_parser("search", help="search candidate architectures")
    _add_run(p)
    p.add_argument("--budget", type=int, help="override search.budget")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("oracle", help="train ranking-set subnets from scratch")
    _add_run(p)
    p.add_argument("--arch", action="append", help="architecture string (repeatable)")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("rank", help="rank correlation between estimates and ground truth")
    _add_run(p)
    p.add_argument("--benchmark", help="benchmark table file instead of trained oracles")
    p.add_argument("--exclude-ops", help="comma-separated ops to filter out (cell spaces)")
    p.add_argument("--skip-from", help="op substituted away in the sensitivity scan")
    p.add_argument("--skip-to", default="skip_connect", help="replacement op")
    p.set_defaults(fn=cmd_rank)

    p = sub.add_parser("diagnose", help="feature-shift matrix and weight-drift series")
    _add_run(p)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("sweep", help="run every trainer mode and tabulate outcomes")
    p.add_argument("--root", required=True, help="parent directory for the mode runs")
    _add_config(p)
    p.add_argument("--modes", help="comma-separated subset of modes")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify-run", help="check artifact hashes against the manifest")
    _add_run(p)
    p.set_defaults(fn=cmd_verify_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except PinasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
