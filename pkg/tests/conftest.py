import time
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ipddp import ProblemDefinition, get_benchmark, solve

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


def random_spd(rng, d, floor=0.5):
    A = rng.normal(size=(d, d))
    return A @ A.T + floor * np.eye(d)


def lq_problem(rng, n=3, m=2, N=10, **extra):
    """Linear dynamics with quadratic costs; matrices are attached as attributes of the returned tuple."""
    A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    Q = random_spd(rng, n)
    R = random_spd(rng, m)
    P = random_spd(rng, n)
    x0 = rng.normal(size=n)

    prob = ProblemDefinition(
        n_states=n, n_controls=m, horizon=N, initial_state=x0,
        dynamics=lambda k, x, u: A @ x + B @ u,
        stage_cost=lambda k, x, u: 0.5 * x @ Q @ x + 0.5 * u @ R @ u,
        terminal_cost=lambda x: 0.5 * x @ P @ x,
        **extra,
    )
    return prob, dict(A=A, B=B, Q=Q, R=R, P=P, x0=x0)


def riccati(data, N):
    """Finite-horizon LQR: feedback gains K_k (u = K_k x) and the optimal state trajectory."""
    A, B, Q, R, P = (data[k] for k in "ABQRP")
    gains = [None] * N
    S = P
    for k in range(N - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
        S = Q + A.T @ S @ (A + B @ K)
        S = 0.5 * (S + S.T)
        gains[k] = K
    xs = [data["x0"]]
    us = []
    for k in range(N):
        us.append(gains[k] @ xs[-1])
        xs.append(A @ xs[-1] + B @ us[-1])
    return gains, np.array(xs), np.array(us)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@lru_cache(maxsize=None)
def solved_benchmark(name):
    """Solve a benchmark once per session with its default settings and all iterates kept."""
    prob, U0, spec = get_benchmark(name)
    config = spec.solver_config(keep_iterates=True)
    t0 = time.perf_counter()
    res = solve(prob, U0, config)
    return prob, config, res, time.perf_counter() - t0


# acceptance criteria report ---------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
