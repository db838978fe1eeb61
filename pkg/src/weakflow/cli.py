"""Command line: weakflow {run,validate,sweep,oracle}.

Exit codes: 0 all checks pass, 1 some check fails, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, parse_config
from .experiments import run_experiment
from .oracles import ORACLES
from .results import write_results


def _load(args):
    cfg = parse_config(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), output=getattr(args, "out", None))


def _execute(args, expect_sweep=False) -> int:
    cfg = _load(args)
    if expect_sweep and cfg.kind != "sweep":
        raise ConfigError([f"[experiment] kind = {cfg.kind}: the sweep command needs kind = sweep"])
    bundle = run_experiment(cfg, workers=args.workers)
    paths = write_results(bundle, cfg.output)
    for c in bundle.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.check_id}: measured={c.measured} "
              f"tolerance={c.tolerance}")
    print(f"wrote {len(paths)} files to {cfg.output}")
    return 0 if bundle.passed else 1


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(f"{args.config}: ok ({cfg.kind}, hash {cfg.config_hash})")
    if args.echo:
        print(cfg.echo())
    return 0


def cmd_oracle(args) -> int:
    if args.name not in ORACLES:
        print(f"unknown oracle {args.name!r}; choose from: {', '.join(sorted(ORACLES))}",
              file=sys.stderr)
        return 2
    print(json.dumps(ORACLES[args.name](), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run an experiment config"), ("sweep", "run a sweep config")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $WEAKFLOW_WORKERS or 1)")
        s.add_argument("--out", help="override the output directory")
    s = sub.add_parser("validate", help="parse and check a config without running it")
    s.add_argument("config")
    s.add_argument("--echo", action="store_true", help="print the resolved config")
    s = sub.add_parser("oracle", help="print closed-form reference values")
    s.add_argument("name", nargs="?", default="list")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _execute(args)
        if args.command == "sweep":
            return _execute(args, expect_sweep=True)
        if args.command == "validate":
            return cmd_validate(args)
        if args.name == "list":
            print("\n".join(sorted(ORACLES)))
            return 0
        return cmd_oracle(args)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
