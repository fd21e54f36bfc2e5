"""Backward sweep: constrained Q-expansion, regularization, gains, value recursion.

At each stage the primal-dual Newton system in ``(dz, dlam, ds)`` is reduced
to a system in ``dz = (dx, du)`` alone by eliminating the multiplier and
slack rows. With ``T = eps I`` the reduced Hessian and gradient are

    Qzz = Bzz + hz' diag(tau / s^2) hz + gz' gz / eps
    Qz  = Bz  + hz' (tau h / s^2) + hz' (tau / s) + gz' g / eps

where ``Bzz``/``Bz`` are the DDP terms plus multiplier- and barrier-weighted
constraint curvature. Everything below works in stacked ``z`` coordinates and
splits into ``x``/``u`` blocks only where the policy needs them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .core import IPDDPError, NumericError, ProblemDefinition, SlackDomainError, SolverConfig, Trajectory
from .derivatives import DerivativeBundle, trajectory_bundles

MU2_MAX = 1e8


class RegularizationFailure(IPDDPError):
    def __init__(self, stage: int, mu2: float):
        self.stage = stage
        self.mu2 = mu2
        super().__init__(f"could not make Q_zz positive definite at stage {stage} (mu2 > {mu2:g})")


class FactorizationError(IPDDPError):
    """Cholesky of the regularized Q_uu failed; the caller must regularize further."""


@dataclass(frozen=True)
class ValueExpansion:
    V: float
    V_x: np.ndarray
    V_xx: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.V + np.sum(self.V_x) + np.sum(self.V_xx)):
            raise ValueError("value expansion has non-finite entries")
        if self.V_xx.size:
            scale = max(1.0, float(np.abs(self.V_xx).max()))
            if float(np.abs(self.V_xx - self.V_xx.T).max()) > 1e-10 * scale:
                raise ValueError("V_xx is not symmetric")


@dataclass(frozen=True)
class QExpansion:
    n: int
    Q: float
    Q_z: np.ndarray
    Q_zz: np.ndarray

    @property
    def Q_x(self):
        return self.Q_z[: self.n]

    @property
    def Q_u(self):
        return self.Q_z[self.n :]

    @property
    def Q_xx(self):
        return self.Q_zz[: self.n, : self.n]

    @property
    def Q_xu(self):
        return self.Q_zz[: self.n, self.n :]

    @property
    def Q_ux(self):
        return self.Q_zz[self.n :, : self.n]

    @property
    def Q_uu(self):
        return self.Q_zz[self.n :, self.n :]


@dataclass(frozen=True)
class RegularizedQ:
    Q_xx: np.ndarray
    Q_xu: np.ndarray
    Q_ux: np.ndarray
    Q_uu: np.ndarray
    min_eig_before: float
    min_eig_after: float


@dataclass(frozen=True)
class StageGain:
    """Policy ``du = k_ff + K_fb dx`` and the constraint data the forward pass reuses."""

    k_ff: np.ndarray
    K_fb: np.ndarray
    mu2_used: float = 0.0
    g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    g_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    g_u: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    h_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    h_u: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    h_plus_s: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class GainSchedule:
    stages: tuple
    terminal: StageGain
    lambda_reg: float
    debug: tuple = ()

    @property
    def max_mu2(self) -> float:
        return max((g.mu2_used for g in self.stages), default=0.0)


def _contract(w: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``sum_i w_i T[i]`` for a stack of matrices."""
    if w.size == 0:
        return np.zeros(T.shape[1:])
    return (w @ T.reshape(w.shape[0], -1)).reshape(T.shape[1:])


def _sym(A):
    return 0.5 * (A + A.T)


def _require_positive(s):
    if s.size and not np.all(s > 0):
        raise SlackDomainError("slack entries must be strictly positive")


def _constraint_terms(b: DerivativeBundle, s, lam, tau, lambda_reg):
    """Constraint contributions to (Q, Q_z, Q_zz) at one stage."""
    s = np.asarray(s, dtype=float)
    lam = np.asarray(lam, dtype=float)
    d = b.l_z.shape[0]
    if s.size == 0 and lam.size == 0:
        return 0.0, np.zeros(d), np.zeros((d, d))
    _require_positive(s)
    w = tau / s
    val = float(lam @ b.g) + float(np.sum(w * (b.h + s))) - tau * float(np.sum(np.log(s)))
    grad = b.g_z.T @ lam + b.h_z.T @ w
    hess = _contract(lam, b.g_zz) + _contract(w, b.h_zz)
    # elimination of the multiplier and slack rows
    grad = grad + b.h_z.T @ (w * b.h / s) + b.h_z.T @ w + b.g_z.T @ b.g / lambda_reg
    hess = hess + b.h_z.T @ ((w / s)[:, None] * b.h_z) + b.g_z.T @ b.g_z / lambda_reg
    return val, grad, hess


def _stacked_constraint_terms(bundles, slacks, mults, tau, lambda_reg):
    """``_constraint_terms`` for every stage, batched when the stage dimensions agree."""
    sizes = {(b.g.shape[0], b.h.shape[0]) for b in bundles}
    if len(sizes) != 1:
        return [_constraint_terms(b, s, l, tau, lambda_reg) for b, s, l in zip(bundles, slacks, mults)]
    p, q = sizes.pop()
    N, d = len(bundles), bundles[0].l_z.shape[0]
    if p == 0 and q == 0:
        zero_g, zero_h = np.zeros(d), np.zeros((d, d))
        return [(0.0, zero_g, zero_h)] * N
    S = np.array(slacks, dtype=float).reshape(N, q)
    if q and not np.all(S > 0):
        raise SlackDomainError("slack entries must be strictly positive")
    L = np.array(mults, dtype=float).reshape(N, p)
    g = np.array([b.g for b in bundles]).reshape(N, p)
    g_z = np.array([b.g_z for b in bundles]).reshape(N, p, d)
    g_zz = np.array([b.g_zz for b in bundles]).reshape(N, p, d, d)
    h = np.array([b.h for b in bundles]).reshape(N, q)
    h_z = np.array([b.h_z for b in bundles]).reshape(N, q, d)
    h_zz = np.array([b.h_zz for b in bundles]).reshape(N, q, d, d)
    W = tau / S
    val = np.sum(L * g, axis=1) + np.sum(W * (h + S), axis=1) - tau * np.sum(np.log(S), axis=1)
    r = L + g / lambda_reg
    grad = np.einsum("kp,kpd->kd", r, g_z) + np.einsum("kq,kqd->kd", 2.0 * W + W * h / S, h_z)
    hess = (
        np.einsum("kp,kpde->kde", L, g_zz)
        + np.einsum("kq,kqde->kde", W, h_zz)
        + np.einsum("kq,kqd,kqe->kde", W / S, h_z, h_z)
        + np.einsum("kpd,kpe->kde", g_z, g_z) / lambda_reg
    )
    return [(float(val[k]), grad[k], hess[k]) for k in range(N)]


def terminal_value(bundle: DerivativeBundle, s_N, lambda_N, tau: float, lambda_reg: float) -> ValueExpansion:
    val, grad, hess = _constraint_terms(bundle, s_N, lambda_N, tau, lambda_reg)
    return ValueExpansion(bundle.l + val, bundle.l_z + grad, _sym(bundle.l_zz + hess))


def q_expansion(
    bundle: DerivativeBundle, nxt: ValueExpansion, s, lam, tau: float, lambda_reg: float, terms=None
) -> QExpansion:
    """Constrained Q-expansion at one stage.

    ``terms`` may carry the precomputed constraint contributions for this
    stage; they do not depend on the next-stage value.
    """
    b = bundle
    val, grad, hess = terms if terms is not None else _constraint_terms(b, s, lam, tau, lambda_reg)
    Q = b.l + nxt.V + val
    Q_z = b.l_z + b.f_z.T @ nxt.V_x + grad
    Q_zz = b.l_zz + b.f_z.T @ nxt.V_xx @ b.f_z + _contract(nxt.V_x, b.f_zz) + hess
    return QExpansion(b.n, Q, Q_z, Q_zz)


def regularize_q(q: QExpansion, mu1: float, mu2_init: float, eig_tol: float, f_x, f_u, block: str = "zz"):
    """Return ``(RegularizedQ, mu2)`` with the smallest ladder ``mu2`` that makes Q_zz PD.

    The ladder is ``0, mu2_init, 10 mu2_init, ...``; a shift by ``mu2 I``
    moves every eigenvalue by exactly ``mu2``, so one eigensolve suffices.
    """
    if eig_tol <= 0:
        raise ValueError("eig_tol must be positive")
    f_x, f_u = np.asarray(f_x), np.asarray(f_u)
    Q_ux = q.Q_ux + mu1 * (f_u.T @ f_x)
    Q_uu = q.Q_uu + mu1 * (f_u.T @ f_u)
    Q_xx = q.Q_xx
    if block == "zz":
        n = Q_xx.shape[0]
        test = q.Q_zz.copy()
        test[n:, :n] = Q_ux
        test[:n, n:] = Q_ux.T
        test[n:, n:] = Q_uu
        test = _sym(test)
    else:
        test = _sym(Q_uu)
    lo = float(np.linalg.eigvalsh(test)[0])
    if not np.isfinite(lo):
        raise RegularizationFailure(-1, 0.0)
    mu2 = 0.0
    if lo < eig_tol:
        mu2 = mu2_init
        while lo + mu2 < eig_tol:
            mu2 *= 10.0
            if mu2 > MU2_MAX:
                raise RegularizationFailure(-1, MU2_MAX)
    n, m = Q_xx.shape[0], Q_uu.shape[0]
    reg = RegularizedQ(
        Q_xx=Q_xx + mu2 * np.eye(n),
        Q_xu=Q_ux.T,
        Q_ux=Q_ux,
        Q_uu=Q_uu + mu2 * np.eye(m),
        min_eig_before=lo,
        min_eig_after=lo + mu2,
    )
    return reg, mu2


def compute_gains(Q_uu_reg, Q_u, Q_ux) -> StageGain:
    try:
        Q_uu_reg = _sym(np.asarray(Q_uu_reg, dtype=float))
        if not np.isfinite(Q_uu_reg).all():
            raise ValueError("non-finite Q_uu")
        factor = scipy.linalg.cho_factor(Q_uu_reg, lower=True, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FactorizationError(str(exc)) from exc
    rhs = np.column_stack([np.asarray(Q_u).reshape(-1, 1), np.asarray(Q_ux)])
    sol = -scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    return StageGain(k_ff=sol[:, 0].copy(), K_fb=sol[:, 1:].copy())


def value_update(q: QExpansion, gain: StageGain) -> ValueExpansion:
    k, K = gain.k_ff, gain.K_fb
    Q_uu, Q_u, Q_ux = q.Q_uu, q.Q_u, q.Q_ux
    V = q.Q + 0.5 * k @ Q_uu @ k + k @ Q_u
    V_x = q.Q_x + K.T @ (Q_uu @ k) + K.T @ Q_u + Q_ux.T @ k
    V_xx = q.Q_xx + K.T @ Q_uu @ K + K.T @ Q_ux + Q_ux.T @ K
    return ValueExpansion(float(V), V_x, _sym(V_xx))


def _cache_constraints(gain: StageGain, b: DerivativeBundle, s, mu2: float = 0.0) -> StageGain:
    return StageGain(
        gain.k_ff, gain.K_fb, mu2, g=b.g, g_x=b.g_x, g_u=b.g_u, h=b.h, h_x=b.h_x, h_u=b.h_u,
        h_plus_s=b.h + np.asarray(s),
    )


def backward_pass(problem: ProblemDefinition, traj: Trajectory, tau: float, config: SolverConfig, bundles=None):
    """One sweep from the terminal stage down to stage 0.

    Returns the gain schedule and ``max_k ||Q_u||_inf`` over all stages.
    """
    N = problem.horizon
    if bundles is None:
        bundles = trajectory_bundles(problem, traj)
    lambda_reg = float(config.lambda_reg_fn(tau))
    if not lambda_reg > 0:
        raise ValueError("lambda_reg_fn must return a positive value")

    bN = bundles[N]
    value = terminal_value(bN, traj.slacks[N], traj.multipliers[N], tau, lambda_reg)
    terminal = _cache_constraints(
        StageGain(k_ff=np.zeros(0), K_fb=np.zeros((0, problem.n_states))), bN, traj.slacks[N]
    )

    terms = _stacked_constraint_terms(bundles[:N], traj.slacks[:N], traj.multipliers[:N], tau, lambda_reg)
    gains = [None] * N
    debug = []
    opt_inf = 0.0
    for k in range(N - 1, -1, -1):
        b = bundles[k]
        q = q_expansion(b, value, traj.slacks[k], traj.multipliers[k], tau, lambda_reg, terms[k])
        if not (np.isfinite(q.Q) and np.all(np.isfinite(q.Q_z)) and np.all(np.isfinite(q.Q_zz))):
            raise NumericError(k, "Q-expansion")
        try:
            reg, mu2 = regularize_q(q, config.mu1, config.mu2_init, config.eig_tol, b.f_x, b.f_u, config.pd_block)
        except RegularizationFailure as exc:
            raise RegularizationFailure(k, exc.mu2) from None
        while True:
            try:
                gain = compute_gains(reg.Q_uu, q.Q_u, q.Q_ux)
                break
            except FactorizationError:
                bump = max(mu2 * 10.0, config.mu2_init)
                if bump > MU2_MAX:
                    raise RegularizationFailure(k, MU2_MAX) from None
                reg = replace(reg, Q_uu=reg.Q_uu + (bump - mu2) * np.eye(reg.Q_uu.shape[0]))
                mu2 = bump
        gain = _cache_constraints(gain, b, traj.slacks[k], mu2)
        gains[k] = gain
        qu_inf = float(np.max(np.abs(q.Q_u))) if q.Q_u.size else 0.0
        opt_inf = max(opt_inf, qu_inf)
        try:
            if config.value_blocks == "regularized":
                n = problem.n_states
                Qzz = q.Q_zz.copy()
                Qzz[:n, :n] = reg.Q_xx
                Qzz[n:, :n] = reg.Q_ux
                Qzz[:n, n:] = reg.Q_xu
                Qzz[n:, n:] = reg.Q_uu
                value = value_update(QExpansion(q.n, q.Q, q.Q_z, Qzz), gain)
            else:
                value = value_update(q, gain)
        except ValueError:
            raise NumericError(k, "value expansion") from None
        if config.debug_stages:
            debug.append({
                "stage": k,
                "qu_inf": qu_inf,
                "min_eig_before": reg.min_eig_before,
                "min_eig_after": reg.min_eig_after,
                "mu2": mu2,
            })
    debug.reverse()
    return GainSchedule(tuple(gains), terminal, lambda_reg, tuple(debug)), opt_inf
