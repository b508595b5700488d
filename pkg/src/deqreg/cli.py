"""Command-line entry point."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import STAGES, ExperimentConfig
from .gradcheck import run_gradchecks
from .pipeline import run_experiment

SINGLE_STAGE = ("gen-data", "train", "attack", "defend", "report")


def build_parser():
    p = argparse.ArgumentParser(prog="deqreg", description="Toy DEQ robustness experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI configuration file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override experiment.seed")
        sp.add_argument("--out", help="override the output directory")

    for name in SINGLE_STAGE:
        common(sub.add_parser(name, help=f"run the {name} stage"))
    run = sub.add_parser("run", help="run the configured stages (full pipeline by default)")
    common(run)
    run.add_argument("--stage", action="append", choices=STAGES,
                     help="run only this stage; repeat to run several in order")
    gc = sub.add_parser("gradcheck", help="compare reverse-mode gradients with finite differences")
    gc.add_argument("--n", type=int, default=200, help="number of random instances")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gradcheck":
        summary = run_gradchecks(args.n, seed=args.seed)
        for name, err in summary.max_rel_error.items():
            print(f"{name}\tmax_rel_error={err:.3e}")
        ok = summary.passed(args.tol)
        print("PASS" if ok else "FAIL")
        return 0 if ok else 1
    config = args.config if args.config else ExperimentConfig()
    if args.command == "run":
        stages = args.stage
    else:
        stages = [args.command]
    return run_experiment(config, out=args.out, seed=args.seed, stages=stages)


if __name__ == "__main__":
    sys.exit(main())
