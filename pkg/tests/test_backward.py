from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipddp import SolverConfig, Trajectory, get_benchmark, initialize_variables, rollout
from ipddp.backward import (
    MU2_MAX,
    QExpansion,
    RegularizationFailure,
    StageGain,
    ValueExpansion,
    _cache_constraints,
    backward_pass,
    compute_gains,
    q_expansion,
    regularize_q,
    terminal_value,
    value_update,
)
from ipddp.derivatives import DerivativeBundle, terminal_derivative_bundle
from ipddp.forward import stage_step_update
from ipddp.problems import make_pendulum

from conftest import lq_problem, random_spd, riccati


def sym_stack(rng, p, d):
    A = rng.normal(size=(p, d, d))
    return 0.5 * (A + np.swapaxes(A, 1, 2))


def random_bundle(rng, n=3, m=2, p=1, q=2, curvature=5.0):
    d = n + m
    l_zz = random_spd(rng, d, floor=curvature)
    return DerivativeBundle(
        n, m,
        f=rng.normal(size=n), f_z=rng.normal(size=(n, d)), f_zz=0.1 * sym_stack(rng, n, d),
        l=float(rng.normal()), l_z=rng.normal(size=d), l_zz=l_zz,
        g=rng.normal(size=p), g_z=rng.normal(size=(p, d)), g_zz=0.1 * sym_stack(rng, p, d),
        h=-np.abs(rng.normal(size=q)), h_z=rng.normal(size=(q, d)), h_zz=0.1 * sym_stack(rng, q, d),
    )


def random_value(rng, n=3):
    return ValueExpansion(float(rng.normal()), rng.normal(size=n), random_spd(rng, n))


def unconstrained_bundle(b):
    d = b.n + b.m
    return DerivativeBundle(
        b.n, b.m, b.f, b.f_z, b.f_zz, b.l, b.l_z, b.l_zz,
        np.zeros(0), np.zeros((0, d)), np.zeros((0, d, d)),
        np.zeros(0), np.zeros((0, d)), np.zeros((0, d, d)),
    )


# dense KKT oracle -------------------------------------------------------------

def dense_stage_step(b, nxt, s, lam, tau, eps, dx):
    """Solve the stage Newton system in (du, dlam, ds) for a fixed dx, without elimination."""
    n, m = b.n, b.m
    p, q = b.g.size, b.h.size
    w = tau / s
    B_z = b.l_z + b.f_z.T @ nxt.V_x + b.g_z.T @ lam + b.h_z.T @ w
    B_zz = (
        b.l_zz + b.f_z.T @ nxt.V_xx @ b.f_z
        + np.einsum("i,ijk->jk", nxt.V_x, b.f_zz)
        + np.einsum("i,ijk->jk", lam, b.g_zz)
        + np.einsum("i,ijk->jk", w, b.h_zz)
    )
    D = np.diag(tau / s**2)
    g_x, g_u = b.g_z[:, :n], b.g_z[:, n:]
    h_x, h_u = b.h_z[:, :n], b.h_z[:, n:]
    K = np.zeros((m + p + q, m + p + q))
    r = np.zeros(m + p + q)
    K[:m, :m] = B_zz[n:, n:]
    K[:m, m : m + p] = g_u.T
    K[:m, m + p :] = -h_u.T @ D
    r[:m] = -(B_z[n:] + B_zz[n:, :n] @ dx)
    K[m : m + p, :m] = g_u
    K[m : m + p, m : m + p] = -eps * np.eye(p)
    r[m : m + p] = -(b.g + g_x @ dx)
    K[m + p :, :m] = h_u
    K[m + p :, m + p :] = np.eye(q)
    r[m + p :] = -(b.h + s) - h_x @ dx
    sol = np.linalg.solve(K, r)
    return sol[:m], sol[m : m + p], sol[m + p :]


def eliminated_stage_step(b, nxt, s, lam, tau, eps, x, u, dx):
    q = q_expansion(b, nxt, s, lam, tau, eps)
    reg, mu2 = regularize_q(q, 0.0, 1e-6, 1e-6, b.f_x, b.f_u)
    gain = _cache_constraints(compute_gains(reg.Q_uu, q.Q_u, q.Q_ux), b, s, mu2)
    u_new, lam_new, s_new = stage_step_update(gain, x + dx, x, u, lam, s, 1.0, eps, SolverConfig())
    return mu2, u_new - u, lam_new - lam, s_new - s


@pytest.mark.parametrize("seed", range(50))
def test_eliminated_step_matches_dense_kkt_solve(seed):
    rng = np.random.default_rng(1000 + seed)
    b, nxt = random_bundle(rng), random_value(rng)
    s = rng.uniform(0.5, 2.0, size=2)
    lam = rng.normal(size=1)
    tau, eps = rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)
    x, u, dx = rng.normal(size=3), rng.normal(size=2), rng.normal(size=3)

    mu2, du, dlam, ds = eliminated_stage_step(b, nxt, s, lam, tau, eps, x, u, dx)
    assert mu2 == 0.0
    du_ref, dlam_ref, ds_ref = dense_stage_step(b, nxt, s, lam, tau, eps, dx)
    assert np.allclose(du, du_ref, rtol=1e-9, atol=1e-9)
    assert np.allclose(dlam, dlam_ref, rtol=1e-9, atol=1e-9)
    assert np.allclose(ds, ds_ref, rtol=1e-9, atol=1e-9)


def test_scalar_stage_with_one_linear_inequality_matches_direct_evaluation():
    # f = a x + c u, l = (x^2 + r u^2) / 2, h = u - 1; everything scalar
    a, c, r, P, Vx = 1.1, 0.7, 0.3, 2.0, 0.4
    x, u, s, tau = 0.5, 0.2, 0.6, 0.1
    b = DerivativeBundle(
        1, 1,
        f=np.array([a * x + c * u]), f_z=np.array([[a, c]]), f_zz=np.zeros((1, 2, 2)),
        l=0.5 * (x * x + r * u * u), l_z=np.array([x, r * u]), l_zz=np.diag([1.0, r]),
        g=np.zeros(0), g_z=np.zeros((0, 2)), g_zz=np.zeros((0, 2, 2)),
        h=np.array([u - 1.0]), h_z=np.array([[0.0, 1.0]]), h_zz=np.zeros((1, 2, 2)),
    )
    nxt = ValueExpansion(0.0, np.array([Vx]), np.array([[P]]))
    q = q_expansion(b, nxt, np.array([s]), np.zeros(0), tau, 1.0)
    h = u - 1.0
    Bu = r * u + c * Vx + tau / s
    assert q.Q_u[0] == pytest.approx(Bu + tau * h / s**2 + tau / s, rel=1e-15)
    assert q.Q_x[0] == pytest.approx(x + a * Vx, rel=1e-15)
    assert q.Q_uu[0, 0] == pytest.approx(r + c * c * P + tau / s**2, rel=1e-15)
    assert q.Q_ux[0, 0] == pytest.approx(c * P * a, rel=1e-15)
    assert q.Q_xx[0, 0] == pytest.approx(1.0 + a * a * P, rel=1e-15)


# q_expansion ----------------------------------------------------------------------

def test_unconstrained_q_expansion_is_plain_ddp(rng):
    b = unconstrained_bundle(random_bundle(rng))
    nxt = random_value(rng)
    q = q_expansion(b, nxt, np.zeros(0), np.zeros(0), 1.0, 1.0)
    Q_z = b.l_z + b.f_z.T @ nxt.V_x
    Q_zz = b.l_zz + b.f_z.T @ nxt.V_xx @ b.f_z + np.einsum("i,ijk->jk", nxt.V_x, b.f_zz)
    assert q.Q == b.l + nxt.V
    assert np.allclose(q.Q_z, Q_z, rtol=1e-12, atol=1e-12)
    assert np.allclose(q.Q_zz, Q_zz, rtol=1e-12, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_unconstrained_reduction_on_random_problems(seed):
    rng = np.random.default_rng(seed)
    b = unconstrained_bundle(random_bundle(rng, n=int(rng.integers(1, 5)), m=int(rng.integers(1, 4))))
    nxt = random_value(rng, b.n)
    q = q_expansion(b, nxt, np.zeros(0), np.zeros(0), rng.uniform(0.1, 10), rng.uniform(0.1, 10))
    Q_zz = b.l_zz + b.f_z.T @ nxt.V_xx @ b.f_z + np.einsum("i,ijk->jk", nxt.V_x, b.f_zz)
    assert np.allclose(q.Q_zz, Q_zz, rtol=1e-12, atol=1e-12)


def test_doubling_lambda_reg_halves_equality_penalty(rng):
    b = random_bundle(rng, q=0)
    nxt = random_value(rng)
    lam = rng.normal(size=1)
    base = q_expansion(b, nxt, np.zeros(0), lam, 1.0, 1.0)
    no_pen = q_expansion(b, nxt, np.zeros(0), lam, 1.0, np.inf)
    double = q_expansion(b, nxt, np.zeros(0), lam, 1.0, 2.0)
    assert np.allclose(double.Q_zz - no_pen.Q_zz, 0.5 * (base.Q_zz - no_pen.Q_zz), rtol=1e-12, atol=1e-12)
    assert np.allclose(double.Q_z - no_pen.Q_z, 0.5 * (base.Q_z - no_pen.Q_z), rtol=1e-12, atol=1e-12)


# terminal value -------------------------------------------------------------------

def test_terminal_value_without_constraints(rng):
    b = unconstrained_bundle(random_bundle(rng))
    tb = DerivativeBundle(3, 0, np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3, 3)),
                          b.l, b.l_z[:3], b.l_zz[:3, :3], b.g, b.g_z[:, :3], b.g_zz[:, :3, :3],
                          b.h, b.h_z[:, :3], b.h_zz[:, :3, :3])
    v = terminal_value(tb, np.zeros(0), np.zeros(0), 3.0, 3.0)
    assert v.V == tb.l
    assert np.array_equal(v.V_x, tb.l_z)
    assert np.array_equal(v.V_xx, tb.l_zz)


def test_terminal_value_at_feasible_point():
    b = DerivativeBundle(
        1, 0, np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1, 1)),
        2.5, np.array([1.0]), np.array([[1.0]]),
        np.array([0.0]), np.array([[1.0]]), np.zeros((1, 1, 1)),
        np.array([-1.0]), np.array([[2.0]]), np.zeros((1, 1, 1)),
    )
    v = terminal_value(b, np.array([1.0]), np.array([0.7]), 4.0, 1.0)
    assert v.V == 2.5


def test_pendulum_terminal_value_by_hand():
    prob = make_pendulum()
    x = np.array([0.1, -0.2])
    U = np.zeros((prob.horizon, 1))
    s, lam, _ = initialize_variables(prob, rollout(prob, U), U)
    tau = 10.0
    v = terminal_value(terminal_derivative_bundle(prob, x), s[-1], lam[-1], tau, tau)
    # terminal equality g = x, unit multipliers, no inequalities, no terminal cost
    assert v.V == pytest.approx(1.0 * 0.1 + 1.0 * -0.2, abs=1e-15)
    assert v.V_x[0] == pytest.approx(1.0 + 0.1 / tau, abs=1e-15)
    assert v.V_x[1] == pytest.approx(1.0 - 0.2 / tau, abs=1e-15)
    assert np.allclose(v.V_xx, np.eye(2) / tau, rtol=1e-15, atol=0)


# regularization ---------------------------------------------------------------------

def q_from_zz(Q_zz, n):
    d = Q_zz.shape[0]
    return QExpansion(n, 0.0, np.zeros(d), np.asarray(Q_zz, dtype=float))


def test_positive_definite_block_is_unchanged():
    reg, mu2 = regularize_q(q_from_zz(np.eye(2), 1), 0.0, 1e-6, 1e-6, np.eye(1), np.eye(1))
    assert mu2 == 0.0
    assert np.array_equal(reg.Q_uu, [[1.0]])


def test_ladder_value_for_indefinite_block():
    reg, mu2 = regularize_q(q_from_zz(np.diag([-1.0, 1.0]), 1), 0.0, 1e-6, 1e-6, np.eye(1), np.eye(1))
    assert mu2 == pytest.approx(10.0, rel=1e-12)
    assert reg.min_eig_after >= 1e-6


def test_mu1_with_zero_control_jacobian_only_shifts_by_mu2(rng):
    Q_zz = random_spd(rng, 3) - 4.0 * np.eye(3)
    q = q_from_zz(Q_zz, 2)
    reg, mu2 = regularize_q(q, 5.0, 1e-6, 1e-6, rng.normal(size=(2, 2)), np.zeros((2, 1)))
    assert np.allclose(reg.Q_uu, q.Q_uu + mu2 * np.eye(1), rtol=0, atol=1e-14)
    assert np.array_equal(reg.Q_ux, q.Q_ux)


@given(st.integers(0, 2**32 - 1))
def test_ladder_is_minimal(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    Q_zz = random_spd(rng, d) - rng.uniform(0, 30) * np.eye(d)
    q = q_from_zz(Q_zz, d - 1)
    reg, mu2 = regularize_q(q, 0.0, 1e-6, 1e-6, np.eye(d - 1), np.ones((d - 1, 1)))
    test = np.block([[reg.Q_xx, reg.Q_xu], [reg.Q_ux, reg.Q_uu]])
    assert np.linalg.eigvalsh(test)[0] >= 1e-6 * (1 - 1e-9)
    assert np.linalg.eigvalsh(reg.Q_uu)[0] >= 1e-6 * (1 - 1e-9)
    if mu2 > 0:
        prev = 0.0 if mu2 == 1e-6 else mu2 / 10
        assert np.linalg.eigvalsh(Q_zz + prev * np.eye(d))[0] < 1e-6


def test_ladder_gives_up_beyond_cap():
    with pytest.raises(RegularizationFailure):
        regularize_q(q_from_zz(np.diag([-10 * MU2_MAX, 1.0]), 1), 0.0, 1e-6, 1e-6, np.eye(1), np.eye(1))


# gains and value update ---------------------------------------------------------------

def test_scalar_gains():
    gain = compute_gains([[2.0]], [4.0], [[1.0, 0.0]])
    assert np.allclose(gain.k_ff, [-2.0], rtol=1e-15, atol=0)
    assert np.allclose(gain.K_fb, [[-0.5, 0.0]], rtol=1e-15, atol=0)


def test_stationary_stage_has_zero_feedforward(rng):
    gain = compute_gains(random_spd(rng, 2), np.zeros(2), rng.normal(size=(2, 3)))
    assert np.array_equal(gain.k_ff, np.zeros(2))


def test_gain_residual(rng):
    A = random_spd(rng, 3)
    Q_u, Q_ux = rng.normal(size=3), rng.normal(size=(3, 4))
    gain = compute_gains(A, Q_u, Q_ux)
    assert np.abs(A @ gain.k_ff + Q_u).max() <= 1e-12
    assert np.abs(A @ gain.K_fb + Q_ux).max() <= 1e-12


def test_zero_gain_value_update(rng):
    q = QExpansion(2, 1.5, rng.normal(size=3), random_spd(rng, 3))
    v = value_update(q, StageGain(np.zeros(1), np.zeros((1, 2))))
    assert v.V == q.Q
    assert np.array_equal(v.V_x, q.Q_x)
    assert np.allclose(v.V_xx, q.Q_xx, rtol=0, atol=1e-15)


def test_scalar_value_update_arithmetic():
    q = QExpansion(1, 1.0, np.array([1.0, 2.0]), np.array([[3.0, 1.0], [1.0, 2.0]]))
    v = value_update(q, StageGain(np.array([-1.0]), np.array([[-0.5]])))
    assert v.V == 0.0
    assert v.V_x[0] == 0.0
    assert v.V_xx[0, 0] == 2.5


def test_one_stage_value_update_is_riccati(rng):
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    Q, R, P = random_spd(rng, 3), random_spd(rng, 2), random_spd(rng, 3)
    Q_zz = np.block([[Q + A.T @ P @ A, A.T @ P @ B], [B.T @ P @ A, R + B.T @ P @ B]])
    q = QExpansion(3, 0.0, np.zeros(5), Q_zz)
    gain = compute_gains(q.Q_uu, q.Q_u, q.Q_ux)
    v = value_update(q, gain)
    riccati_P = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    assert np.allclose(v.V_xx, riccati_P, rtol=1e-10, atol=1e-10)


# backward pass --------------------------------------------------------------------

def empty_traj(prob, U):
    empty = tuple(np.zeros(0) for _ in range(prob.horizon + 1))
    return Trajectory(rollout(prob, U), U, empty, empty)


def test_unconstrained_lq_gains_match_lqr(rng):
    prob, data = lq_problem(rng, N=10)
    traj = empty_traj(prob, np.zeros((10, prob.n_controls)))
    gains, _ = backward_pass(prob, traj, 1.0, SolverConfig())
    K_ref, _, _ = riccati(data, 10)
    for k in range(10):
        assert np.allclose(gains.stages[k].K_fb, K_ref[k], rtol=1e-10, atol=1e-10)
        # at u = 0 the feedforward is K x_k
        assert np.allclose(gains.stages[k].k_ff, K_ref[k] @ traj.states[k], rtol=1e-10, atol=1e-10)


def test_one_step_algebra(rng):
    prob, data = lq_problem(rng, N=1)
    u = rng.normal(size=(1, prob.n_controls))
    traj = empty_traj(prob, u)
    gains, opt_inf = backward_pass(prob, traj, 1.0, SolverConfig())
    A, B, Q, R, P = (data[k] for k in "ABQRP")
    x0 = data["x0"]
    x1 = A @ x0 + B @ u[0]
    l_u, l_uu = R @ u[0], R
    k_ref = -np.linalg.solve(l_uu + B.T @ P @ B, l_u + B.T @ (P @ x1))
    assert np.allclose(gains.stages[0].k_ff, k_ref, rtol=1e-12, atol=1e-12)
    assert opt_inf == pytest.approx(np.abs(l_u + B.T @ P @ x1).max(), rel=1e-12)


def test_zero_cost_gives_zero_feedforward(rng):
    prob, _ = lq_problem(rng)
    prob = replace(prob, stage_cost=lambda k, x, u: 0.0, terminal_cost=lambda x: 0.0)
    traj = empty_traj(prob, np.zeros((prob.horizon, prob.n_controls)))
    gains, opt_inf = backward_pass(prob, traj, 1.0, SolverConfig(eig_tol=1e-12, mu2_init=1e-6))
    assert opt_inf == 0.0
    assert all(np.array_equal(g.k_ff, np.zeros(prob.n_controls)) for g in gains.stages)


@pytest.mark.parametrize("name", ["pendulum", "cstr", "parking", "obstacle"])
def test_backward_pass_invariants_on_benchmarks(name):
    prob, U, spec = get_benchmark(name)
    X = rollout(prob, U)
    s, lam, tau0 = initialize_variables(prob, X, U)
    traj = Trajectory(X, U, s, lam)
    config = spec.solver_config(debug_stages=True)
    gains, opt_inf = backward_pass(prob, traj, tau0, config)
    assert len(gains.stages) == prob.horizon
    assert np.isfinite(opt_inf)
    assert len(gains.debug) == prob.horizon
    for entry in gains.debug:
        assert entry["min_eig_after"] >= config.eig_tol * (1 - 1e-9)
    assert [e["stage"] for e in gains.debug] == list(range(prob.horizon))
