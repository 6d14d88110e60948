"""Command-line driver.

Subcommands: ``train`` runs one experiment, ``eval`` re-evaluates a
checkpoint, ``sweep`` drives a parameter sweep, and ``gradcheck`` /
``equivalence`` run the numeric oracle suites so CI can gate on them.
Exit codes: 0 success, 1 configuration problems, 2 numeric-check
failure.
"""
from __future__ import annotations

import argparse
import sys

from . import config as config_mod
from . import experiment
from .checkpoint import CheckpointError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK_FAILED = 2


def _add_common(parser: argparse.ArgumentParser, config_required: bool) -> None:
    parser.add_argument("--config", required=config_required,
                        help="path to a key = value config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's master_seed")
    parser.add_argument("--out-dir", default=".", help="where result files go")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fronthaul",
        description="split edge-cloud training over simulated fading fronthaul links")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (("train", True), ("eval", True), ("sweep", True),
                               ("gradcheck", False), ("equivalence", False)):
        p = sub.add_parser(name)
        _add_common(p, needs_config)
    return parser


def _load(args) -> dict:
    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg["master_seed"] = int(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = _load(args)
            if cfg["sweep"] != "none":
                raise config_mod.ConfigError("config asks for a sweep; use the sweep command")
            result = experiment.run_training(cfg, args.out_dir)
            for entry in result.grid:
                print(f"n_test={entry['n_test']} snr={entry['snr_db']} dB: "
                      f"accuracy={entry['accuracy']:.4f}")
            return EXIT_OK
        if args.command == "eval":
            cfg = _load(args)
            result = experiment.run_eval(cfg, args.out_dir)
            for entry in result.grid:
                print(f"n_test={entry['n_test']} snr={entry['snr_db']} dB: "
                      f"accuracy={entry['accuracy']:.4f}")
            return EXIT_OK
        if args.command == "sweep":
            cfg = _load(args)
            result = experiment.run_sweep(cfg, args.out_dir)
            for row in result.rows:
                print(f"{row['sweep']}={row['value']}: accuracy={row['accuracy']:.4f}")
            return EXIT_OK
        if args.command == "gradcheck":
            report = experiment.run_gradcheck(seed=args.seed or 0)
            print(f"gradcheck: {report['instances']} instances, "
                  f"max relative error {report['max_rel_err']:.3e} "
                  f"(tolerance {report['tolerance']:.0e}), {report['elapsed_s']:.1f}s")
            return EXIT_OK if report["ok"] else EXIT_CHECK_FAILED
        if args.command == "equivalence":
            report = experiment.run_equivalence(seed=args.seed or 0)
            print(f"equivalence: dedicated max deviation {report['dedicated_max_dev']:.3e}, "
                  f"shared-encoder max deviation {report['fedavg_max_dev']:.3e} "
                  f"(tolerance {report['tolerance']:.0e}), {report['elapsed_s']:.1f}s")
            return EXIT_OK if report["ok"] else EXIT_CHECK_FAILED
    except (config_mod.ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
