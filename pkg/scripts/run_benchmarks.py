"""Solve all four benchmarks with their default settings and write artifacts.

    python3 scripts/run_benchmarks.py --out results
"""

import argparse
import sys

from ipddp.cli import main
from ipddp.problems import BENCHMARKS


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results", help="one subdirectory per benchmark is created here")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("names", nargs="*", default=list(BENCHMARKS))
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    # the CLI nests per-benchmark directories only when given several names
    out = args.out if len(args.names) > 1 else f"{args.out}/{args.names[0]}"
    argv = ["run", *args.names, "--out", out, "--jobs", str(args.jobs), "--emit", "trajectory,history,plotdata"]
    sys.exit(main(argv))
