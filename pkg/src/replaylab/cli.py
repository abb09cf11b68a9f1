"""``replaylab`` command line: generate, run, report, config.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 contract or
state error, 5 training error, 6 artifact/IO error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .continual import REGIMES
from .errors import ReplayLabError, UsageError
from .experiment import (
    ORDER_MODES, ExperimentConfig, cmd_generate, cmd_report, cmd_run, load_config,
    parse_regimes, parse_seeds,
)

log = logging.getLogger("replaylab")

# (data, model, train) overrides on top of ExperimentConfig defaults
PRESETS = {
    "desk": (dict(cohort="desk4"), {}, dict(lr=1e-3)),
    "reference": (dict(cohort="ref8", volume=(64, 64, 64)),
              dict(spatial_rank=3, levels=3, base_features=32, patch_size=64),
              dict(lr=1e-4, epochs=150, patch_size=64)),
}


def preset(name: str) -> ExperimentConfig:
    data, model, train = PRESETS[name]
    cfg = ExperimentConfig(**data)
    cfg.model = replace(cfg.model, **model)
    cfg.train = replace(cfg.train, **train)
    cfg.validate()
    return cfg


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output", None):
        cfg.output = args.output
    if getattr(args, "seeds", None):
        cfg.seeds = parse_seeds(args.seeds)
    if getattr(args, "regimes", None):
        cfg.regimes = parse_regimes(args.regimes)
    if getattr(args, "order", None):
        cfg.order = args.order
    cfg.validate()
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="experiment config file (section.key = value)")
    p.add_argument("-o", "--output", help="output directory (overrides experiment.output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replaylab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic cohort archive")
    _add_common(g)

    r = sub.add_parser("run", help="train and evaluate every (regime x seed) cell")
    _add_common(r)
    r.add_argument("--seeds", help="seed override, e.g. 0-8 or 0,3,5")
    r.add_argument("--regimes", help=f"comma-separated subset of: {', '.join(REGIMES)}")
    r.add_argument("--order", choices=ORDER_MODES, help="domain order mode")
    r.add_argument("--no-report", action="store_true", help="skip writing report tables")

    rep = sub.add_parser("report", help="write curves, BWT table and heatmaps from finished cells")
    _add_common(rep)

    c = sub.add_parser("config", help="print a complete config file")
    c.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "config":
            sys.stdout.write(preset(args.preset).to_text())
        elif args.command == "generate":
            cfg = _config(args)
            dirs, written = cmd_generate(cfg)
            print(f"{len(dirs)} domains in {Path(dirs[0]).parent} ({written} written)")
        elif args.command == "run":
            cfg = _config(args)
            cells = cmd_run(cfg)
            print(f"{len(cells)} cells complete in {cfg.output}")
            if not args.no_report:
                for name, path in cmd_report(cfg.output).items():
                    print(f"{name}: {path}")
        elif args.command == "report":
            output = args.output or _config(args).output
            for name, path in cmd_report(output).items():
                print(f"{name}: {path}")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"replaylab: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ReplayLabError as exc:
        print(f"replaylab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"replaylab: I/O error: {exc}", file=sys.stderr)
        return 6
    return 0


if __name__ == "__main__":
    sys.exit(main())
