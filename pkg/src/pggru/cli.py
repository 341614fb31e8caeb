"""Command-line entry point: ``pggru <command> [flags]``.

Exit codes: 0 success, 1 configuration or missing-input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import MODES, ConfigError, build_config, load_overrides
from .inversion import InversionError
from .lti import RootFindingError
from .pipeline import (
    MissingArtifactError,
    cmd_design_linear,
    cmd_evaluate,
    cmd_generate,
    cmd_search,
    cmd_train,
)
from .plant import SimulationDivergedError
from .train import NonFiniteGradientError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("generate", "design-linear", "train", "evaluate", "search")
NUMERIC_ERRORS = (FloatingPointError, SimulationDivergedError, InversionError, RootFindingError,
                  NonFiniteGradientError, np.linalg.LinAlgError)


def build_parser():
    ap = argparse.ArgumentParser(prog="pggru", description="Preview GRU feedforward experiments")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON file with configuration overrides")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--mode", choices=MODES + ("all",),
                    help="model to train or search (train default: all, search default: pg-gru)")
    ap.add_argument("--budget", type=int, help="number of random-search trials")
    ap.add_argument("--preset", choices=("desk", "full"), default="desk")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = load_overrides(args.config) if args.config else None
        cfg = build_config(args.preset, overrides, args.seed, args.out)
        if args.budget is not None and args.budget < 1:
            raise ConfigError("--budget must be >= 1")
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "design-linear":
            _, report = cmd_design_linear(cfg)
            print(f"eta0={report['eta0']} n_ep={report['n_ep']} unstable_poles={report['n_unstable']}")
        elif args.command == "train":
            modes = MODES if args.mode in (None, "all") else (args.mode,)
            for mode in modes:
                res = cmd_train(cfg, mode)
                print(f"{mode}: final loss {res.loss_history[-1] if res.loss_history else res.initial_loss:.6g}")
        elif args.command == "evaluate":
            table, nrms_table = cmd_evaluate(cfg)
            print("IAE [rad*s]     " + "  ".join(f"{r:>9}" for r in ("R1", "R2", "R3")))
            for c, vals in table.items():
                print(f"{c:<15} " + "  ".join(f"{v:9.4f}" for v in vals))
            if nrms_table:
                print("NRMS [%]")
                for c, vals in nrms_table.items():
                    print(f"{c:<15} " + "  ".join(f"{v:9.3f}" for v in vals))
        elif args.command == "search":
            mode = "pg-gru" if args.mode in (None, "all") else args.mode
            results = cmd_search(cfg, mode, args.budget)
            best = next((r for r in results if r.ok), None)
            if best is not None:
                print(f"best trial {best.index}: NRMS {best.val_nrms:.3f}% {best.params}")
    except (ConfigError, MissingArtifactError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
