"""``muwarm`` command line.

    muwarm RECIPE [--config PATH] [--out DIR] [--seed N] [--lambda X] [--corpus PATH]

The exit status is 0 iff every acceptance assertion of the recipe holds;
2 signals a usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from types import SimpleNamespace

from .parameterization import ConfigError
from .recipes import RECIPES, DeskConfig, run_recipe


def build_parser():
    p = argparse.ArgumentParser(prog="muwarm", description="Warmstarted muP experiments at desk scale.")
    p.add_argument("recipe", choices=RECIPES)
    p.add_argument("--config", help="JSON file overriding the desk defaults")
    p.add_argument("--out", default="muwarm_out", help="lab directory (runs are reused across invocations)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--lambda", dest="lambda_shrink", type=float, help="shrink factor for warmstarting")
    p.add_argument("--corpus", help="raw-byte or TOK16 corpus file (default: bundled synthetic corpus)")
    p.add_argument("--workers", type=int, help="parallel training processes")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    cfg = DeskConfig.load(args.config) if args.config else DeskConfig()
    over = {}
    if args.seed is not None:
        over["seeds"] = [args.seed]
    if args.lambda_shrink is not None:
        over["lambda_shrink"] = args.lambda_shrink
    if args.corpus is not None:
        over["corpus"] = args.corpus
    if args.workers is not None:
        over["workers"] = args.workers
    return DeskConfig.from_dict({**cfg.to_dict(), **over})


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.recipe == "report":
            # the report reads artifacts only; no corpus needed
            os.makedirs(args.out, exist_ok=True)
            lab = SimpleNamespace(out_dir=args.out)
        else:
            lab = cfg.make_lab(args.out)
        outcome = run_recipe(args.recipe, cfg, lab)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"muwarm: error: {exc}", file=sys.stderr)
        return 2
    for c in outcome.checks:
        print(c.line())
    print(f"{args.recipe}: {'PASS' if outcome.passed else 'FAIL'}")
    return 0 if outcome.passed else 1


if __name__ == "__main__":
    sys.exit(main())
