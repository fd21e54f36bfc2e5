"""Finite-difference check of every benchmark along its initial trajectory."""

import sys

from ipddp.cli import main
from ipddp.problems import BENCHMARKS

if __name__ == "__main__":
    codes = [main(["check-derivatives", name]) for name in BENCHMARKS]
    sys.exit(max(codes))
