"""Problem definition, trajectory containers and the merit / violation measures.

Constraint dimensions may differ from stage to stage (terminal-only equality
constraints are the common case), so slacks and multipliers are stored as
ragged lists of 1-D arrays rather than rectangular arrays.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class IPDDPError(Exception):
    """Base class for solver errors."""


class RolloutDivergence(IPDDPError):
    def __init__(self, stage: int, message: str = ""):
        self.stage = stage
        super().__init__(message or f"non-finite state produced at stage {stage}")


class SlackDomainError(IPDDPError, ValueError):
    """A slack entry that must be strictly positive is not."""


class NumericError(IPDDPError):
    def __init__(self, stage: int, what: str):
        self.stage = stage
        super().__init__(f"non-finite {what} at stage {stage}")


def _empty(*_args):
    return np.zeros(0)


@dataclass(frozen=True)
class ProblemDefinition:
    """Discrete-time optimal control problem with stagewise constraints.

    Stage callables take ``(k, x, u)``; terminal callables take ``x``.
    Inequalities are feasible when ``h <= 0``. Every callable must be written
    with NumPy-compatible arithmetic so that it can be evaluated on jets.

    Set ``vectorized`` when the stage callables also accept a whole batch of
    stages at once: ``k`` an integer array of length ``B`` and ``x``/``u``
    laid out component-first, so that ``x[i]`` is the length-``B`` row of
    component ``i``. Outputs then stack the same way. Batching is only an
    acceleration; results must agree with stage-by-stage evaluation.
    """

    n_states: int
    n_controls: int
    horizon: int
    initial_state: np.ndarray
    dynamics: Callable
    stage_cost: Callable
    terminal_cost: Callable
    stage_eq: Callable = _empty
    stage_ineq: Callable = _empty
    terminal_eq: Callable = _empty
    terminal_ineq: Callable = _empty
    name: str = "problem"
    vectorized: bool = False

    def __post_init__(self):
        if self.n_states <= 0 or self.n_controls <= 0 or self.horizon <= 0:
            raise ValueError("n_states, n_controls and horizon must be positive")
        x0 = np.array(self.initial_state, dtype=float).reshape(-1)
        if x0.shape != (self.n_states,):
            raise ValueError(f"initial_state must have length {self.n_states}")
        x0.setflags(write=False)
        object.__setattr__(self, "initial_state", x0)

    # plain (float) evaluations ------------------------------------------

    def f(self, k, x, u) -> np.ndarray:
        return np.asarray(self.dynamics(k, x, u), dtype=float).reshape(self.n_states)

    def g(self, k, x, u=None) -> np.ndarray:
        if k == self.horizon:
            return np.asarray(self.terminal_eq(x), dtype=float).reshape(-1)
        return np.asarray(self.stage_eq(k, x, u), dtype=float).reshape(-1)

    def h(self, k, x, u=None) -> np.ndarray:
        if k == self.horizon:
            return np.asarray(self.terminal_ineq(x), dtype=float).reshape(-1)
        return np.asarray(self.stage_ineq(k, x, u), dtype=float).reshape(-1)

    def cost(self, k, x, u=None) -> float:
        if k == self.horizon:
            return float(self.terminal_cost(x))
        return float(self.stage_cost(k, x, u))

    def stage_costs(self, states, controls) -> np.ndarray:
        """Running costs of stages ``0..N-1`` as a length-``N`` array."""
        N = self.horizon
        if self.vectorized:
            c = self.stage_cost(np.arange(N), np.asarray(states[:N]).T, np.asarray(controls).T)
            return np.broadcast_to(np.asarray(c, dtype=float), (N,)).copy()
        return np.array([self.cost(k, states[k], controls[k]) for k in range(N)])

    def stage_residuals(self, states, controls):
        """Lists ``(g_k, h_k)`` for stages ``0..N-1``."""
        N = self.horizon
        if not self.vectorized:
            return (
                [self.g(k, states[k], controls[k]) for k in range(N)],
                [self.h(k, states[k], controls[k]) for k in range(N)],
            )
        ks, X, U = np.arange(N), np.asarray(states[:N]).T, np.asarray(controls).T
        out = []
        for fn in (self.stage_eq, self.stage_ineq):
            r = np.asarray(fn(ks, X, U), dtype=float)
            r = np.zeros((N, 0)) if r.size == 0 else np.broadcast_to(r.reshape(r.shape[0], -1), (r.shape[0], N)).T
            out.append(list(r))
        return out[0], out[1]

    def is_unconstrained(self, traj: "Trajectory") -> bool:
        return all(s.size == 0 for s in traj.slacks) and all(l.size == 0 for l in traj.multipliers)


@dataclass(frozen=True)
class Trajectory:
    """States ``(N+1, n)``, controls ``(N, m)`` and ragged slacks / multipliers."""

    states: np.ndarray
    controls: np.ndarray
    slacks: tuple = ()
    multipliers: tuple = ()

    def __post_init__(self):
        for name in ("states", "controls"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "slacks", tuple(np.asarray(s, dtype=float).reshape(-1) for s in self.slacks))
        object.__setattr__(
            self, "multipliers", tuple(np.asarray(l, dtype=float).reshape(-1) for l in self.multipliers)
        )

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def min_slack(self) -> float:
        sizes = [s.min() for s in self.slacks if s.size]
        return min(sizes) if sizes else math.inf


@dataclass(frozen=True)
class CappedTau:
    """Multiplier-block weight ``min(tau, cap)``; picklable, unlike a lambda."""

    cap: float

    def __post_init__(self):
        if not self.cap > 0:
            raise ValueError("cap must be positive")

    def __call__(self, tau: float) -> float:
        return min(tau, self.cap)


@dataclass(frozen=True)
class SolverConfig:
    eps_tol: float = 1e-4
    eps_theta: float = 1e-2
    ftb_eps: float = 0.995
    eps_tau: float = 1.0
    mu1: float = 0.0
    mu2_init: float = 1e-6
    eig_tol: float = 1e-6
    lambda_reg_fn: Callable[[float], float] = field(default=lambda tau: tau)
    alpha_backtrack: float = 0.5
    max_outer_iters: int = 500
    max_line_search_iters: int = 30
    literal_eq26_controls: bool = False
    literal_eq26_multipliers: bool = False
    merit_rtol: float = 1e-10
    keep_iterates: bool = False
    debug_stages: bool = False
    pd_block: str = "zz"
    value_blocks: str = "plain"
    slack_reset: bool = False

    def __post_init__(self):
        checks = [
            ("eps_tol", self.eps_tol > 0),
            ("eps_theta", 0 < self.eps_theta < 1),
            ("ftb_eps", 0 < self.ftb_eps < 1),
            ("eps_tau", self.eps_tau > 0),
            ("mu1", self.mu1 >= 0),
            ("mu2_init", self.mu2_init > 0),
            ("eig_tol", self.eig_tol > 0),
            ("alpha_backtrack", 0 < self.alpha_backtrack < 1),
            ("max_outer_iters", int(self.max_outer_iters) == self.max_outer_iters and self.max_outer_iters > 0),
            ("max_line_search_iters", int(self.max_line_search_iters) == self.max_line_search_iters
             and self.max_line_search_iters > 0),
            ("merit_rtol", self.merit_rtol >= 0),
        ]
        bad = [name for name, ok in checks if not ok]
        if bad:
            raise ValueError(f"invalid SolverConfig field(s): {', '.join(bad)}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    tau: float
    phi: float
    theta: float
    alpha: float
    opt_inf: float
    mu2: float
    ls_trials: int
    phi_prev: float = math.nan
    theta_prev: float = math.nan
    branch: str = ""

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError("theta must be nonnegative")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def rollout(problem: ProblemDefinition, controls) -> np.ndarray:
    controls = np.asarray(controls, dtype=float).reshape(problem.horizon, problem.n_controls)
    states = np.empty((problem.horizon + 1, problem.n_states))
    states[0] = problem.initial_state
    for k in range(problem.horizon):
        nxt = problem.f(k, states[k], controls[k])
        if not np.all(np.isfinite(nxt)):
            raise RolloutDivergence(k)
        states[k + 1] = nxt
    return states


def _check_slacks(slacks):
    for k, s in enumerate(slacks):
        if s.size and not np.all(s > 0):
            raise SlackDomainError(f"nonpositive slack at stage {k}")


def total_cost(traj: Trajectory, problem: ProblemDefinition) -> float:
    N = problem.horizon
    return float(np.sum(problem.stage_costs(traj.states, traj.controls))) + problem.cost(N, traj.states[N])


def merit_phi(traj: Trajectory, problem: ProblemDefinition, tau: float) -> float:
    """Barrier merit: total cost minus ``tau`` times the summed slack logs."""
    _check_slacks(traj.slacks)
    barrier = sum(float(np.sum(np.log(s))) for s in traj.slacks if s.size)
    return total_cost(traj, problem) - tau * barrier


def violation_theta(traj: Trajectory, problem: ProblemDefinition) -> float:
    """l1 norm of every equality residual and every shifted inequality ``h + s``."""
    N = problem.horizon
    gs, hs = problem.stage_residuals(traj.states, traj.controls)
    gs.append(problem.g(N, traj.states[N]))
    hs.append(problem.h(N, traj.states[N]))
    total = 0.0
    for k, (g, h) in enumerate(zip(gs, hs)):
        if h.shape != traj.slacks[k].shape or g.shape != traj.multipliers[k].shape:
            raise ValueError(f"constraint dimension mismatch at stage {k}")
        total += float(np.sum(np.abs(h + traj.slacks[k]))) + float(np.sum(np.abs(g)))
    return total


def initialize_variables(problem: ProblemDefinition, states, controls):
    """Slacks ``max(h, 1)``, unit multipliers and the initial barrier parameter."""
    N = problem.horizon
    slacks, mults = [], []
    for k in range(N + 1):
        u = controls[k] if k < N else None
        slacks.append(np.maximum(problem.h(k, states[k], u), 1.0))
        mults.append(np.ones(problem.g(k, states[k], u).size))
    traj = Trajectory(states, controls, tuple(slacks), tuple(mults))
    # the merit is taken at tau = 0 since tau is what is being chosen
    tau0 = max(merit_phi(traj, problem, 0.0) / N, 10.0)
    return traj.slacks, traj.multipliers, tau0


# serialization ------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_to_csv(traj: Trajectory) -> str:
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    N = traj.horizon
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)])
    for k in range(N + 1):
        row = [str(k)] + [_fmt(v) for v in traj.states[k]]
        row += [_fmt(v) for v in traj.controls[k]] if k < N else [""] * m
        w.writerow(row)
    return buf.getvalue()


def trajectory_from_csv(text: str) -> Trajectory:
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], rows[1:]
    n = sum(1 for c in header if c.startswith("x"))
    m = sum(1 for c in header if c.startswith("u"))
    states = np.array([[float(v) for v in r[1 : 1 + n]] for r in body])
    controls = np.array([[float(v) for v in r[1 + n : 1 + n + m]] for r in body[:-1]]).reshape(-1, m)
    return Trajectory(states, controls)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(trajectory_to_csv(traj))


def read_trajectory_csv(path) -> Trajectory:
    with open(path) as fh:
        return trajectory_from_csv(fh.read())


def with_updates(traj: Trajectory, **changes) -> Trajectory:
    fields = dict(states=traj.states, controls=traj.controls, slacks=traj.slacks, multipliers=traj.multipliers)
    fields.update(changes)
    return Trajectory(**fields)
