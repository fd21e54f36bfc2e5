"""Forward pass and backtracking line search."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backward import GainSchedule, StageGain
from .core import (
    IPDDPError,
    ProblemDefinition,
    RolloutDivergence,
    SolverConfig,
    Trajectory,
    merit_phi,
    violation_theta,
)

FEASIBLE = "feasible-decrease"
VIOLATION = "violation-decrease"
MERIT = "merit-decrease"


class LineSearchFailure(IPDDPError):
    def __init__(self, trials: int, alpha: float, best: dict | None):
        self.trials = trials
        self.alpha = alpha
        self.best = best
        super().__init__(f"line search failed after {trials} trials (last alpha {alpha:.3g}); best trial {best}")


@dataclass(frozen=True)
class LineSearchOutcome:
    trajectory: Trajectory
    alpha: float
    alpha_max: float
    phi_old: float
    theta_old: float
    phi_new: float
    theta_new: float
    trials: int
    branch: str


def max_step(slacks, slack_steps, ftb_eps: float) -> float:
    """Largest ``alpha`` in (0, 1] keeping ``s + alpha ds >= (1 - ftb_eps) s``."""
    alpha = 1.0
    for s, ds in zip(slacks, slack_steps):
        s = np.asarray(s, dtype=float)
        ds = np.asarray(ds, dtype=float)
        neg = ds < 0
        if np.any(neg):
            with np.errstate(over="ignore"):  # subnormal steps give inf, capped at 1 anyway
                alpha = min(alpha, float(np.min(ftb_eps * s[neg] / (-ds[neg]))))
    return alpha


def stage_step_update(
    gain: StageGain, x_new, x_old, u_old, lambda_old, s_old, alpha: float, lambda_reg: float, config: SolverConfig
):
    """Explicit control, multiplier and slack updates at one stage.

    For the terminal stage pass empty ``u_old``; the control update is then
    empty and ``du = 0``.
    """
    dx = np.asarray(x_new) - np.asarray(x_old)
    u_old = np.asarray(u_old, dtype=float)
    if u_old.size:
        if config.literal_eq26_controls:
            u_new = u_old + gain.k_ff + alpha * (gain.K_fb @ dx)
        else:
            u_new = u_old + alpha * gain.k_ff + gain.K_fb @ dx
        du = u_new - u_old
        g_lin = gain.g_x @ dx + gain.g_u @ du if gain.g.size else gain.g
        h_lin = gain.h_x @ dx + gain.h_u @ du if gain.h.size else gain.h
    else:
        u_new = u_old
        g_lin = gain.g_x @ dx if gain.g.size else gain.g
        h_lin = gain.h_x @ dx if gain.h.size else gain.h

    sign = -1.0 if config.literal_eq26_multipliers else 1.0
    lam_new = np.asarray(lambda_old) + sign * (alpha * gain.g + g_lin) / lambda_reg
    s_new = np.asarray(s_old) - alpha * gain.h_plus_s - h_lin
    return u_new, lam_new, s_new


def forward_pass(
    problem: ProblemDefinition, traj_old: Trajectory, gains: GainSchedule, alpha: float, config: SolverConfig
) -> Trajectory:
    N = problem.horizon
    X_old, U_old = traj_old.states, traj_old.controls
    X = np.empty_like(X_old)
    U = np.empty_like(U_old)
    slacks, mults = [None] * (N + 1), [None] * (N + 1)
    X[0] = problem.initial_state
    for k in range(N):
        U[k], mults[k], slacks[k] = stage_step_update(
            gains.stages[k], X[k], X_old[k], U_old[k], traj_old.multipliers[k], traj_old.slacks[k],
            alpha, gains.lambda_reg, config,
        )
        nxt = problem.f(k, X[k], U[k])
        if not np.all(np.isfinite(nxt)) or not np.all(np.isfinite(U[k])):
            raise RolloutDivergence(k)
        X[k + 1] = nxt
    _, mults[N], slacks[N] = stage_step_update(
        gains.terminal, X[N], X_old[N], np.zeros(0), traj_old.multipliers[N], traj_old.slacks[N],
        alpha, gains.lambda_reg, config,
    )
    return Trajectory(X, U, tuple(slacks), tuple(mults))


def slack_step_proxy(gains: GainSchedule):
    """Slack directions with ``dx = 0``: ``-(h + s) - h_u k`` (exact at stage 0)."""
    steps = []
    for g in gains.stages:
        ds = -g.h_plus_s
        if g.h.size:
            ds = ds - g.h_u @ g.k_ff
        steps.append(ds)
    steps.append(-gains.terminal.h_plus_s)
    return steps


def acceptance_branch(phi_old, theta_old, phi_new, theta_new, eps_tol, eps_theta, merit_rtol=0.0):
    """Which sufficient-decrease condition a trial meets, or ``None``.

    ``merit_rtol`` absorbs floating-point noise in the merit comparison near
    stationary points, relative to ``max(1, |phi_old|)``.
    """
    if not (math.isfinite(phi_new) and math.isfinite(theta_new)):
        return None
    noise = merit_rtol * max(1.0, abs(phi_old))
    merit_ok = phi_new <= phi_old - eps_theta * theta_old + noise
    if theta_new <= eps_tol:
        return FEASIBLE if merit_ok else None
    if theta_new <= (1.0 - eps_theta) * theta_old:
        return VIOLATION
    if merit_ok:
        return MERIT
    return None


def _slacks_ok(new, old, ftb_eps):
    for s_new, s_old in zip(new, old):
        if s_new.size and not (np.all(s_new > 0) and np.all(s_new >= (1.0 - ftb_eps) * s_old)):
            return False
    return True


def reset_slacks(traj: Trajectory, problem: ProblemDefinition) -> Trajectory:
    """Raise each slack to the actual margin ``-h`` where that margin is larger.

    Lowers both the barrier term and ``|h + s|``, so it never hurts acceptance.
    """
    gs, hs = problem.stage_residuals(traj.states, traj.controls)
    hs.append(problem.h(problem.horizon, traj.states[-1]))
    slacks = tuple(np.maximum(s, -h) if s.size else s for s, h in zip(traj.slacks, hs))
    return Trajectory(traj.states, traj.controls, slacks, traj.multipliers)


def line_search(
    problem: ProblemDefinition, traj_old: Trajectory, gains: GainSchedule, tau: float, config: SolverConfig
) -> LineSearchOutcome:
    phi_old = merit_phi(traj_old, problem, tau)
    theta_old = violation_theta(traj_old, problem)
    alpha_max = max_step(traj_old.slacks, slack_step_proxy(gains), config.ftb_eps)

    best = None
    alpha = alpha_max
    for trial in range(config.max_line_search_iters):
        alpha = alpha_max * config.alpha_backtrack**trial
        try:
            # runaway trials overflow; they are rejected below, not reported
            with np.errstate(over="ignore", invalid="ignore"):
                cand = forward_pass(problem, traj_old, gains, alpha, config)
        except RolloutDivergence:
            continue
        if not _slacks_ok(cand.slacks, traj_old.slacks, config.ftb_eps):
            continue
        if config.slack_reset:
            cand = reset_slacks(cand, problem)
        phi_new = merit_phi(cand, problem, tau)
        theta_new = violation_theta(cand, problem)
        branch = acceptance_branch(
            phi_old, theta_old, phi_new, theta_new, config.eps_tol, config.eps_theta, config.merit_rtol
        )
        if branch is not None:
            return LineSearchOutcome(
                cand, alpha, alpha_max, phi_old, theta_old, phi_new, theta_new, trial + 1, branch
            )
        if best is None or (theta_new, phi_new) < (best["theta"], best["phi"]):
            best = {"alpha": alpha, "phi": phi_new, "theta": theta_new}
    raise LineSearchFailure(config.max_line_search_iters, alpha, best)
