"""Stage and terminal derivative bundles, plus a finite-difference oracle.

Bundles are produced by one jet evaluation per function (see
:mod:`ipddp.jet`) and stored in the stacked ``z = (x, u)`` coordinates used by
the backward pass. The ``x``/``u`` blocks named in the usual DDP notation are
exposed as properties.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import IPDDPError, ProblemDefinition, Trajectory
from .jet import seed_vector, unpack


class DerivativeEvaluationError(IPDDPError):
    def __init__(self, function: str, stage: int):
        self.function = function
        self.stage = stage
        super().__init__(f"non-finite derivative of {function} at stage {stage}")


@dataclass(frozen=True)
class DerivativeBundle:
    """Values, gradients and Hessians at one stage point.

    ``n`` is the state dimension and ``m`` the control dimension (zero for the
    terminal stage). All ``*_z`` arrays differentiate with respect to the
    stacked vector ``z = (x, u)`` of length ``n + m``.
    """

    n: int
    m: int
    f: np.ndarray
    f_z: np.ndarray
    f_zz: np.ndarray
    l: float
    l_z: np.ndarray
    l_zz: np.ndarray
    g: np.ndarray
    g_z: np.ndarray
    g_zz: np.ndarray
    h: np.ndarray
    h_z: np.ndarray
    h_zz: np.ndarray

    # dynamics
    @property
    def f_x(self):
        return self.f_z[:, : self.n]

    @property
    def f_u(self):
        return self.f_z[:, self.n :]

    @property
    def f_xx(self):
        return self.f_zz[:, : self.n, : self.n]

    @property
    def f_xu(self):
        return self.f_zz[:, : self.n, self.n :]

    @property
    def f_ux(self):
        return self.f_zz[:, self.n :, : self.n]

    @property
    def f_uu(self):
        return self.f_zz[:, self.n :, self.n :]

    # cost
    @property
    def l_x(self):
        return self.l_z[: self.n]

    @property
    def l_u(self):
        return self.l_z[self.n :]

    @property
    def l_xx(self):
        return self.l_zz[: self.n, : self.n]

    @property
    def l_xu(self):
        return self.l_zz[: self.n, self.n :]

    @property
    def l_ux(self):
        return self.l_zz[self.n :, : self.n]

    @property
    def l_uu(self):
        return self.l_zz[self.n :, self.n :]

    # constraints
    @property
    def g_x(self):
        return self.g_z[:, : self.n]

    @property
    def g_u(self):
        return self.g_z[:, self.n :]

    @property
    def h_x(self):
        return self.h_z[:, : self.n]

    @property
    def h_u(self):
        return self.h_z[:, self.n :]

    @property
    def g_xx(self):
        return self.g_zz[:, : self.n, : self.n]

    @property
    def g_xu(self):
        return self.g_zz[:, : self.n, self.n :]

    @property
    def g_ux(self):
        return self.g_zz[:, self.n :, : self.n]

    @property
    def g_uu(self):
        return self.g_zz[:, self.n :, self.n :]

    @property
    def h_xx(self):
        return self.h_zz[:, : self.n, : self.n]

    @property
    def h_xu(self):
        return self.h_zz[:, : self.n, self.n :]

    @property
    def h_ux(self):
        return self.h_zz[:, self.n :, : self.n]

    @property
    def h_uu(self):
        return self.h_zz[:, self.n :, self.n :]


def _finite(stage, **arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise DerivativeEvaluationError(name, stage)


def stage_derivative_bundle(problem: ProblemDefinition, k: int, x, u) -> DerivativeBundle:
    if not 0 <= k < problem.horizon:
        raise ValueError(f"stage {k} outside [0, {problem.horizon - 1}]")
    n, m = problem.n_states, problem.n_controls
    d = n + m
    z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])
    zs = seed_vector(z)
    xj, uj = zs[:n], zs[n:]

    f, f_z, f_zz = unpack(problem.dynamics(k, xj, uj), d)
    l, l_z, l_zz = unpack(problem.stage_cost(k, xj, uj), d)
    g, g_z, g_zz = unpack(problem.stage_eq(k, xj, uj), d)
    h, h_z, h_zz = unpack(problem.stage_ineq(k, xj, uj), d)
    _finite(k, dynamics=f_zz, stage_cost=l_zz, stage_eq=g_zz, stage_ineq=h_zz)
    _finite(k, dynamics=f_z, stage_cost=l_z, stage_eq=g_z, stage_ineq=h_z)
    return DerivativeBundle(n, m, f, f_z, f_zz, float(l), l_z, l_zz, g, g_z, g_zz, h, h_z, h_zz)


def terminal_derivative_bundle(problem: ProblemDefinition, x) -> DerivativeBundle:
    n = problem.n_states
    xj = seed_vector(np.asarray(x, dtype=float))
    l, l_z, l_zz = unpack(problem.terminal_cost(xj), n)
    g, g_z, g_zz = unpack(problem.terminal_eq(xj), n)
    h, h_z, h_zz = unpack(problem.terminal_ineq(xj), n)
    N = problem.horizon
    _finite(N, terminal_cost=l_zz, terminal_eq=g_zz, terminal_ineq=h_zz)
    _finite(N, terminal_cost=l_z, terminal_eq=g_z, terminal_ineq=h_z)
    empty = np.zeros(0)
    return DerivativeBundle(
        n, 0, empty, np.zeros((0, n)), np.zeros((0, n, n)),
        float(l), l_z, l_zz, g, g_z, g_zz, h, h_z, h_zz,
    )


def batched_stage_bundles(problem: ProblemDefinition, states, controls):
    """All stage bundles from one batched jet evaluation (``problem.vectorized``)."""
    N = problem.horizon
    n, m = problem.n_states, problem.n_controls
    d = n + m
    Z = np.concatenate([np.asarray(states[:N], dtype=float), np.asarray(controls, dtype=float)], axis=1)
    zs = seed_vector(Z.T)
    xj, uj = zs[:n], zs[n:]
    ks = np.arange(N)
    f, f_z, f_zz = unpack(problem.dynamics(ks, xj, uj), d, N)
    l, l_z, l_zz = unpack(problem.stage_cost(ks, xj, uj), d, N)
    parts = []
    for fn in (problem.stage_eq, problem.stage_ineq):
        r = fn(ks, xj, uj)
        parts.append(unpack(r, d, N) if np.size(r) else (np.zeros((N, 0)), np.zeros((N, 0, d)), np.zeros((N, 0, d, d))))
    (g, g_z, g_zz), (h, h_z, h_zz) = parts
    for name, arr in (("dynamics", f_zz), ("stage_cost", l_zz), ("stage_eq", g_zz), ("stage_ineq", h_zz)):
        bad = ~np.isfinite(arr.reshape(N, -1)).all(axis=1)
        if bad.any():
            raise DerivativeEvaluationError(name, int(np.argmax(bad)))
    return [
        DerivativeBundle(n, m, f[k], f_z[k], f_zz[k], float(l[k]), l_z[k], l_zz[k],
                         g[k], g_z[k], g_zz[k], h[k], h_z[k], h_zz[k])
        for k in range(N)
    ]


def trajectory_bundles(problem: ProblemDefinition, traj: Trajectory):
    """Stage bundles for ``k = 0..N-1`` followed by the terminal bundle."""
    N = problem.horizon
    if problem.vectorized:
        out = batched_stage_bundles(problem, traj.states, traj.controls)
    else:
        out = [stage_derivative_bundle(problem, k, traj.states[k], traj.controls[k]) for k in range(N)]
    out.append(terminal_derivative_bundle(problem, traj.states[N]))
    return out


# finite differences -------------------------------------------------------

def fd_jacobian(fn, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian; rows index outputs, columns inputs."""
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.asarray(point, dtype=float)
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = step
        cols.append((np.atleast_1d(fn(p + e)) - np.atleast_1d(fn(p - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def fd_hessian(fn, point, step: float = 1e-4) -> np.ndarray:
    """Symmetrized second-order central-difference Hessian.

    A scalar ``fn`` gives a ``(d, d)`` matrix; a vector-valued one gives a
    ``(p, d, d)`` stack, one Hessian per output.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.asarray(point, dtype=float)
    d = p.size
    f0 = np.asarray(fn(p), dtype=float)
    H = np.zeros(f0.shape + (d, d))
    eye = np.eye(d) * step
    for i in range(d):
        for j in range(i, d):
            ei, ej = eye[i], eye[j]
            val = (
                np.asarray(fn(p + ei + ej)) - np.asarray(fn(p + ei - ej))
                - np.asarray(fn(p - ei + ej)) + np.asarray(fn(p - ei - ej))
            ) / (4 * step * step)
            H[..., i, j] = val
            H[..., j, i] = val
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def _rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


@dataclass
class DerivativeReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-5
    hess_tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return all(e["pass"] for e in self.entries)

    def failures(self):
        return [e for e in self.entries if not e["pass"]]

    def to_json(self) -> str:
        return json.dumps(self.entries, indent=2)

    def to_table(self) -> str:
        w = max([len("function")] + [len(e["function"]) for e in self.entries])
        lines = [f"{'function':<{w}}  {'stage':>5}  {'max_rel_err':>12}  pass"]
        for e in self.entries:
            lines.append(
                f"{e['function']:<{w}}  {e['stage']:>5}  {e['max_rel_err']:>12.3e}  {'yes' if e['pass'] else 'NO'}"
            )
        return "\n".join(lines)


def check_derivatives(
    problem: ProblemDefinition,
    traj: Trajectory,
    tol: float = 1e-5,
    hess_tol: float = 1e-3,
    step: float = 1e-5,
    hess_step: float = 1e-4,
    stages=None,
    bundle_fn=None,
) -> DerivativeReport:
    """Compare analytic bundles against finite differences along ``traj``.

    One report entry per function, holding the worst stage. ``bundle_fn`` lets
    tests substitute a tampered bundle source.
    """
    N = problem.horizon
    n, m = problem.n_states, problem.n_controls
    stages = range(N + 1) if stages is None else stages
    bundle_fn = bundle_fn or (
        lambda k, x, u: terminal_derivative_bundle(problem, x) if k == N else stage_derivative_bundle(problem, k, x, u)
    )
    worst: dict[str, tuple[float, int, bool]] = {}

    def note(name, stage, err, second):
        prev = worst.get(name)
        if prev is None or err > prev[0]:
            worst[name] = (err, stage, second)

    for k in stages:
        x = traj.states[k]
        if k < N:
            u = traj.controls[k]
            z = np.concatenate([x, u])
            b = bundle_fn(k, x, u)
            fns = {
                "dynamics": lambda zz: problem.f(k, zz[:n], zz[n:]),
                "stage_cost": lambda zz: problem.cost(k, zz[:n], zz[n:]),
                "stage_eq": lambda zz: problem.g(k, zz[:n], zz[n:]),
                "stage_ineq": lambda zz: problem.h(k, zz[:n], zz[n:]),
            }
            pairs = {"dynamics": (b.f_z, b.f_zz), "stage_cost": (b.l_z, b.l_zz),
                     "stage_eq": (b.g_z, b.g_zz), "stage_ineq": (b.h_z, b.h_zz)}
        else:
            z = np.asarray(x, dtype=float)
            b = bundle_fn(k, x, None)
            fns = {
                "terminal_cost": lambda zz: problem.cost(N, zz),
                "terminal_eq": lambda zz: problem.g(N, zz),
                "terminal_ineq": lambda zz: problem.h(N, zz),
            }
            pairs = {"terminal_cost": (b.l_z, b.l_zz), "terminal_eq": (b.g_z, b.g_zz),
                     "terminal_ineq": (b.h_z, b.h_zz)}
        for name, fn in fns.items():
            jac, hess = pairs[name]
            if np.size(fn(z)) == 0:
                continue
            note(f"{name}.jacobian", k, _rel_err(jac, fd_jacobian(fn, z, step).reshape(jac.shape)), False)
            note(f"{name}.hessian", k, _rel_err(hess, fd_hessian(fn, z, hess_step).reshape(hess.shape)), True)

    report = DerivativeReport(tol=tol, hess_tol=hess_tol)
    for name, (err, stage, second) in worst.items():
        lim = hess_tol if second else tol
        report.entries.append({"function": name, "stage": int(stage), "max_rel_err": err, "pass": bool(err <= lim)})
    return report
