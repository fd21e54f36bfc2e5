"""Command-line front end.

    python3 -m ipddp run pendulum --out out --seed 7
    python3 -m ipddp run --config runs/cstr.cfg --emit trajectory,history,plotdata
    python3 -m ipddp check-derivatives parking
    python3 -m ipddp version

Exit codes: 0 tolerance reached, 2 iteration budget exhausted, 3 line-search
or regularization failure, 4 derivative check failed, 1 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .core import ProblemDefinition, SolverConfig, Trajectory, initialize_variables, rollout, trajectory_to_csv
from .derivatives import check_derivatives
from .problems import BENCHMARKS, BenchmarkSpec, get_benchmark
from .solver import LS_FAILURE, MAX_ITERS, REG_FAILURE, TOLERANCE, SolveResult, history_to_csv, solve

EXIT_CODES = {TOLERANCE: 0, MAX_ITERS: 2, LS_FAILURE: 3, REG_FAILURE: 3}
EXIT_USAGE = 1
EXIT_DERIVATIVES = 4
EMIT_CHOICES = ("trajectory", "history", "plotdata", "debug")
DEFAULT_EMIT = ("trajectory", "history")
DEFAULT_OUT = "ipddp_out"

_SOLVER_FIELDS = {f.name: f for f in fields(SolverConfig) if f.name != "lambda_reg_fn"}
_SPEC_FIELDS = {"horizon", "step", "initial_state", "control_lower", "control_upper", "terminal_target", "seed"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    benchmark: str
    out: Path
    seed: int | None = None
    solver: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    emit: tuple = DEFAULT_EMIT


# parsing -------------------------------------------------------------------

def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce_solver(key: str, value):
    if not isinstance(value, str):
        return value
    default = _SOLVER_FIELDS[key].default
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    return value


def _coerce_problem(key: str, value):
    if not isinstance(value, str):
        return value
    try:
        if key in ("horizon", "seed", "substeps"):
            return int(value)
        if key in ("initial_state", "control_lower", "control_upper", "terminal_target"):
            return tuple(float(v) for v in value.replace("(", "").replace(")", "").split(",") if v.strip())
        return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def build_run_config(settings: dict) -> RunConfig:
    """Split a flat settings mapping into benchmark, solver and problem overrides."""
    settings = dict(settings)
    name = settings.pop("benchmark", None)
    if not name:
        raise UsageError("no benchmark given")
    if name not in BENCHMARKS:
        raise UsageError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    spec = BENCHMARKS[name][0]
    out = Path(settings.pop("out", None) or os.environ.get("IPDDP_OUT") or DEFAULT_OUT)
    emit = settings.pop("emit", DEFAULT_EMIT)
    if isinstance(emit, str):
        emit = tuple(e.strip() for e in emit.split(",") if e.strip())
    bad = set(emit) - set(EMIT_CHOICES)
    if bad:
        raise UsageError(f"unknown --emit value(s): {', '.join(sorted(bad))}")
    settings.pop("jobs", None)
    seed = settings.pop("seed", None)
    seed = None if seed is None else int(seed)

    solver, problem = {}, {}
    literal = settings.pop("literal_eq26", None)
    if literal is not None and _parse_bool(str(literal)):
        solver["literal_eq26_controls"] = solver["literal_eq26_multipliers"] = True
    cap = settings.pop("lambda_reg_cap", None)
    if cap is not None:
        solver["lambda_reg_cap"] = float(cap)
    for key, value in settings.items():
        if key in _SOLVER_FIELDS:
            solver[key] = _coerce_solver(key, value)
        elif key in _SPEC_FIELDS or key in spec.params:
            problem[key] = _coerce_problem(key, value)
        else:
            raise UsageError(f"unknown setting {key!r} for benchmark {name}")
    if "debug" in emit:
        solver["debug_stages"] = True
    return RunConfig(name, out, seed, solver, problem, tuple(emit))


def solver_config(spec: BenchmarkSpec, overrides: dict) -> SolverConfig:
    """Benchmark defaults, then ``overrides``; ``lambda_reg_cap`` selects ``min(tau, cap)``."""
    try:
        return spec.solver_config(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# artifacts -----------------------------------------------------------------

def constraints_to_csv(traj: Trajectory, problem: ProblemDefinition) -> str:
    """Long format ``stage,kind,index,value`` with ``kind`` in {g, h}."""
    gs, hs = problem.stage_residuals(traj.states, traj.controls)
    lines = ["stage,kind,index,value"]
    for k, (g, h) in enumerate(zip(gs, hs)):
        lines += [f"{k},g,{i},{float(v):.17g}" for i, v in enumerate(g)]
        lines += [f"{k},h,{i},{float(v):.17g}" for i, v in enumerate(h)]
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc


def emit_trajectory(result: SolveResult, problem: ProblemDefinition, out: Path) -> None:
    _write(out / "trajectory.csv", trajectory_to_csv(result.trajectory))
    _write(out / "constraints.csv", constraints_to_csv(result.trajectory, problem))


def emit_history(result: SolveResult, out: Path, plotdata: bool = False) -> None:
    _write(out / "history.csv", history_to_csv(result.history))
    if plotdata:
        rows = ["iter,theta"] + [f"{r.iteration},{r.theta:.17g}" for r in result.history]
        _write(out / "plotdata.csv", "\n".join(rows) + "\n")


def emit_debug(result: SolveResult, out: Path) -> None:
    _write(out / "debug.jsonl", "".join(json.dumps(d, sort_keys=True) + "\n" for d in result.debug))


# commands ------------------------------------------------------------------

def execute(rc: RunConfig) -> tuple[int, str]:
    """Solve one configured run, write its artifacts, return (exit code, summary)."""
    try:
        problem, U0, spec = get_benchmark(rc.benchmark, seed=rc.seed, **rc.problem)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    config = solver_config(spec, rc.solver)
    t0 = time.perf_counter()
    result = solve(problem, U0, config)
    wall = time.perf_counter() - t0
    if "trajectory" in rc.emit:
        emit_trajectory(result, problem, rc.out)
    if "history" in rc.emit or "plotdata" in rc.emit:
        emit_history(result, rc.out, plotdata="plotdata" in rc.emit)
    if "debug" in rc.emit:
        emit_debug(result, rc.out)
    summary = (
        f"{rc.benchmark}: {result.reason} phi={result.phi:.6g} theta={result.theta:.3e} "
        f"iterations={result.iterations} time={wall:.2f}s"
    )
    if result.error:
        summary += f" ({result.error})"
    return EXIT_CODES[result.reason], summary


def _execute_safe(rc: RunConfig) -> tuple[int, str]:
    try:
        return execute(rc)
    except UsageError as exc:
        return EXIT_USAGE, f"{rc.benchmark}: error: {exc}"


def run_command(args) -> int:
    settings = read_config_file(args.config) if args.config else {}
    names = list(args.names) or ([settings["benchmark"]] if "benchmark" in settings else [])
    if not names:
        raise UsageError("run needs a benchmark name or --config PATH")
    flags = {
        "out": args.out, "seed": args.seed, "eps_tol": args.eps_tol, "eps_tau": args.eps_tau,
        "mu1": args.mu1, "ftb_eps": args.ftb_eps, "max_outer_iters": args.max_outer_iters, "emit": args.emit,
    }
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip().replace("-", "_")] = value.strip()
    if args.literal_eq26:
        flags["literal_eq26"] = "true"
    merged = {**settings, **{k: v for k, v in flags.items() if v is not None}}

    configs = []
    for name in names:
        rc = build_run_config({**merged, "benchmark": name})
        if len(names) > 1:
            rc.out = rc.out / name
        configs.append(rc)

    if args.jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_execute_safe, configs))
    else:
        outcomes = [_execute_safe(rc) for rc in configs]
    for code, summary in outcomes:
        print(summary, file=sys.stdout if code != EXIT_USAGE else sys.stderr)
    return max(code for code, _ in outcomes)


def check_command(args) -> int:
    if args.name not in BENCHMARKS:
        raise UsageError(f"unknown benchmark {args.name!r}; choose from {', '.join(BENCHMARKS)}")
    problem, U0, _ = get_benchmark(args.name, seed=args.seed)
    X = rollout(problem, U0)
    slacks, mults, _ = initialize_variables(problem, X, U0)
    stages = range(0, problem.horizon + 1, args.stride)
    if problem.horizon not in stages:
        stages = [*stages, problem.horizon]
    report = check_derivatives(problem, Trajectory(X, U0, slacks, mults), tol=args.tol, hess_tol=args.hess_tol,
                               stages=stages)
    print(report.to_json() if args.json else report.to_table())
    print(f"{args.name}: derivative check {'passed' if report.passed else 'FAILED'}")
    return 0 if report.passed else EXIT_DERIVATIVES


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipddp", description="Interior-point DDP benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve one or more benchmarks and write artifacts")
    r.add_argument("names", nargs="*", help=f"benchmark name(s): {', '.join(BENCHMARKS)}")
    r.add_argument("--config", help="flat key=value file; command-line flags take precedence")
    r.add_argument("--out", help=f"output directory (default $IPDDP_OUT or ./{DEFAULT_OUT})")
    r.add_argument("--seed", type=int, help="seed of the random initial guess")
    r.add_argument("--eps-tol", type=float)
    r.add_argument("--eps-tau", type=float)
    r.add_argument("--mu1", type=float)
    r.add_argument("--ftb-eps", type=float)
    r.add_argument("--max-outer-iters", type=int)
    r.add_argument("--emit", help=f"comma list from {','.join(EMIT_CHOICES)} (default trajectory,history)")
    r.add_argument("--literal-eq26", action="store_true",
                   help="step size on the feedback term instead of the feedforward, negated multiplier update")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any other solver or benchmark setting, e.g. control_upper=400 or Cf=1.2")
    r.add_argument("--jobs", type=int, default=1, help="solve several benchmarks in parallel")

    c = sub.add_parser("check-derivatives", help="compare derivatives with finite differences")
    c.add_argument("name")
    c.add_argument("--seed", type=int)
    c.add_argument("--stride", type=int, default=1, help="check every STRIDE-th stage (terminal always)")
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--hess-tol", type=float, default=1e-3)
    c.add_argument("--json", action="store_true")

    sub.add_parser("version", help="print the package version")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        if args.command == "run":
            return run_command(args)
        if args.command == "check-derivatives":
            if args.stride < 1:
                raise UsageError("--stride must be positive")
            return check_command(args)
        print(__version__)
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
