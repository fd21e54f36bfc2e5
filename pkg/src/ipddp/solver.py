"""Outer interior-point loop over a decreasing sequence of barrier parameters."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field

import numpy as np

from .backward import RegularizationFailure, backward_pass
from .core import (
    IterationRecord,
    NumericError,
    ProblemDefinition,
    SolverConfig,
    Trajectory,
    initialize_variables,
    merit_phi,
    rollout,
    violation_theta,
)
from .forward import LineSearchFailure, line_search

TOLERANCE = "tolerance-reached"
MAX_ITERS = "max-iters"
LS_FAILURE = "line-search-failure"
REG_FAILURE = "regularization-failure"


@dataclass(frozen=True)
class SolveResult:
    trajectory: Trajectory
    reason: str
    history: tuple
    tau: float
    phi: float
    theta: float
    opt_inf: float
    error: str = ""
    iterates: tuple = field(default=(), repr=False)
    debug: tuple = field(default=(), repr=False)

    @property
    def converged(self) -> bool:
        return self.reason == TOLERANCE

    @property
    def iterations(self) -> int:
        return len(self.history)


def barrier_converged(theta: float, opt_inf: float, tau: float, eps_tau: float) -> bool:
    return max(theta, opt_inf) <= eps_tau * tau


def update_tau(tau: float, eps_tol: float) -> float:
    return max(eps_tol / 10.0, min(0.2 * tau, tau**1.5))


def solve(problem: ProblemDefinition, initial_controls, config: SolverConfig | None = None) -> SolveResult:
    """Run interior-point DDP from ``initial_controls``.

    Subproblems are solved for a decreasing sequence of barrier parameters
    while ``tau >= eps_tol``; the run ends once a converged subproblem moves
    ``tau`` below that threshold. A problem without any constraint has no use
    for the barrier schedule and stops at its first converged subproblem.
    """
    config = config or SolverConfig()
    U0 = np.asarray(initial_controls, dtype=float).reshape(problem.horizon, problem.n_controls)
    X0 = rollout(problem, U0)
    slacks, mults, tau = initialize_variables(problem, X0, U0)
    traj = Trajectory(X0, U0, slacks, mults)
    unconstrained = problem.is_unconstrained(traj)

    history: list[IterationRecord] = []
    iterates = [traj] if config.keep_iterates else []
    debug = []
    reason = MAX_ITERS
    error = ""
    opt_inf = np.inf
    it = 0
    while tau >= config.eps_tol:
        if it >= config.max_outer_iters:
            reason = MAX_ITERS
            break
        it += 1
        try:
            gains, opt_inf = backward_pass(problem, traj, tau, config)
        except (RegularizationFailure, NumericError) as exc:
            reason, error = REG_FAILURE, str(exc)
            break
        try:
            out = line_search(problem, traj, gains, tau, config)
        except LineSearchFailure as exc:
            reason, error = LS_FAILURE, str(exc)
            break
        traj = out.trajectory
        if config.keep_iterates:
            iterates.append(traj)
        if config.debug_stages:
            debug.extend({"iter": it, **d} for d in gains.debug)
        history.append(
            IterationRecord(
                iteration=it, tau=tau, phi=out.phi_new, theta=out.theta_new, alpha=out.alpha,
                opt_inf=opt_inf, mu2=gains.max_mu2, ls_trials=out.trials,
                phi_prev=out.phi_old, theta_prev=out.theta_old, branch=out.branch,
            )
        )
        if barrier_converged(out.theta_new, opt_inf, tau, config.eps_tau):
            if unconstrained:
                reason = TOLERANCE
                break
            tau = update_tau(tau, config.eps_tol)
    else:
        reason = TOLERANCE

    return SolveResult(
        trajectory=traj,
        reason=reason,
        history=tuple(history),
        tau=tau,
        phi=merit_phi(traj, problem, tau),
        theta=violation_theta(traj, problem),
        opt_inf=float(opt_inf),
        error=error,
        iterates=tuple(iterates),
        debug=tuple(debug),
    )


HISTORY_COLUMNS = ("iter", "tau", "phi", "theta", "alpha", "opt_inf", "mu2", "ls_trials")


def history_to_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        w.writerow([
            r.iteration, *(format(float(v), ".17g") for v in (r.tau, r.phi, r.theta, r.alpha, r.opt_inf, r.mu2)),
            r.ls_trials,
        ])
    return buf.getvalue()
