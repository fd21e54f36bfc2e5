"""Benchmark problems: pendulum swing-up, CSTR, car parking, obstacle avoidance.

All model functions are written with NumPy operations on scalar entries so
that they evaluate on floats and on jets alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import CappedTau, ProblemDefinition, SolverConfig
from .jet import Jet


def _vec(*items):
    """Stack scalar entries; floats (or stage batches of floats) become a float array."""
    if any(isinstance(v, Jet) for v in items):
        out = np.empty(len(items), dtype=object)
        for i, v in enumerate(items):
            out[i] = v
        return out
    if not items:
        return np.zeros(0)
    return np.array(np.broadcast_arrays(*items), dtype=float)


def box_constraints(lower, upper, offset: int = 0):
    """Pairs of one-sided inequalities ``u_i - ub <= 0`` and ``lb - u_i <= 0``."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def ineq(u):
        items = []
        for i, (lo, hi) in enumerate(zip(lower, upper)):
            items.append(u[offset + i] - hi)
            items.append(lo - u[offset + i])
        return _vec(*items)

    return ineq


def rk4_discretize(f_cont, h: float, substeps: int = 1):
    """Fixed-step classical Runge-Kutta map ``(k, x, u) -> x(t + h)`` with ``u`` held."""
    if h <= 0:
        raise ValueError("step must be positive")
    if substeps < 1:
        raise ValueError("substeps must be a positive integer")
    dt = h / substeps

    def step(k, x, u):
        x = np.asarray(x)
        for _ in range(substeps):
            k1 = np.asarray(f_cont(x, u))
            k2 = np.asarray(f_cont(x + (0.5 * dt) * k1, u))
            k3 = np.asarray(f_cont(x + (0.5 * dt) * k2, u))
            k4 = np.asarray(f_cont(x + dt * k3, u))
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x

    return step


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    horizon: int
    step: float
    initial_state: tuple
    control_lower: tuple
    control_upper: tuple
    terminal_target: tuple | None
    guess: str  # "uniform", "normal" or "constant"
    guess_params: tuple
    seed: int = 0
    params: dict = field(default_factory=dict)
    # SolverConfig overrides this benchmark is tuned for; ``lambda_reg_cap``
    # stands for ``lambda_reg_fn = CappedTau(cap)``
    solver: dict = field(default_factory=dict)

    def initial_controls(self, m: int, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        N = self.horizon
        if self.guess == "uniform":
            lo, hi = self.guess_params
            return rng.uniform(lo, hi, size=(N, m))
        if self.guess == "normal":
            mean, std = self.guess_params
            return rng.normal(mean, std, size=(N, m))
        if self.guess == "constant":
            return np.full((N, m), float(self.guess_params[0]))
        raise ValueError(f"unknown initial-guess distribution {self.guess!r}")

    def solver_config(self, **overrides) -> SolverConfig:
        """Benchmark solver defaults updated by ``overrides``."""
        merged = {**self.solver, **overrides}
        cap = merged.pop("lambda_reg_cap", None)
        if cap is not None:
            merged["lambda_reg_fn"] = CappedTau(float(cap))
        return SolverConfig(**merged)


# pendulum ----------------------------------------------------------------

PENDULUM = BenchmarkSpec(
    name="pendulum",
    horizon=500,
    step=0.05,
    initial_state=(-np.pi, 0.0),
    control_lower=(-0.25,),
    control_upper=(0.25,),
    terminal_target=(0.0, 0.0),
    guess="uniform",
    guess_params=(-0.01, 0.01),
    solver=dict(value_blocks="regularized", eps_tau=100.0, lambda_reg_cap=1e-3),
)


def make_pendulum(spec: BenchmarkSpec = PENDULUM) -> ProblemDefinition:
    h = spec.step
    bounds = box_constraints(spec.control_lower, spec.control_upper)
    target = np.asarray(spec.terminal_target)

    def dynamics(k, x, u):
        return _vec(x[0] + h * x[1], x[1] + h * np.sin(x[0]) + h * u[0])

    def stage_cost(k, x, u):
        return 0.025 * (x[0] * x[0] + x[1] * x[1] + u[0] * u[0])

    return ProblemDefinition(
        n_states=2, n_controls=1, horizon=spec.horizon, initial_state=spec.initial_state,
        dynamics=dynamics,
        stage_cost=stage_cost,
        terminal_cost=lambda x: 0.0,
        stage_ineq=lambda k, x, u: bounds(u),
        terminal_eq=lambda x: _vec(x[0] - target[0], x[1] - target[1]),
        name="pendulum",
        vectorized=True,
    )


# CSTR --------------------------------------------------------------------

CSTR_CONSTANTS = dict(
    Ea=72750.0, k0=7.2e10, R=8.314, V=100.0, rho=1000.0, cp=0.239, dH=-5e4, UA=5e4,
    Q=100.0, Tf=300.0, Tcf=300.0, Vc=20.0, Cf=1.0,
)

CSTR = BenchmarkSpec(
    name="cstr",
    horizon=400,
    step=0.01,
    initial_state=(0.5, 350.0, 300.0),
    control_lower=(0.0,),
    control_upper=(600.0,),
    terminal_target=(390.0,),
    guess="constant",
    guess_params=(150.0,),
    params=dict(CSTR_CONSTANTS, T_ref=390.0, cost_weight=50.0, substeps=1),
    solver=dict(value_blocks="regularized", lambda_reg_cap=1e-3, max_outer_iters=150),
)


def arrhenius(T, k0=CSTR_CONSTANTS["k0"], Ea=CSTR_CONSTANTS["Ea"], R=CSTR_CONSTANTS["R"]):
    return k0 * np.exp(-Ea / (R * T))


def cstr_field(params: dict):
    p = params

    def rhs(x, u):
        C, T, Tc = x[0], x[1], x[2]
        Qc = u[0]
        K = arrhenius(T, p["k0"], p["Ea"], p["R"])
        dC = p["Q"] / p["V"] * (p["Cf"] - C) - K * C
        dT = (
            p["Q"] / p["V"] * (p["Tf"] - T)
            + (-p["dH"]) / (p["rho"] * p["cp"]) * K * C
            + p["UA"] / (p["rho"] * p["cp"] * p["V"]) * (Tc - T)
        )
        dTc = Qc / p["Vc"] * (p["Tcf"] - Tc) + p["UA"] / (p["rho"] * p["cp"] * p["Vc"]) * (T - Tc)
        return _vec(dC, dT, dTc)

    return rhs


def make_cstr(spec: BenchmarkSpec = CSTR) -> ProblemDefinition:
    p = spec.params
    step = rk4_discretize(cstr_field(p), spec.step, int(p.get("substeps", 1)))
    bounds = box_constraints(spec.control_lower, spec.control_upper)
    T_ref, w = p["T_ref"], p["cost_weight"]
    target = spec.terminal_target[0]

    def stage_cost(k, x, u):
        dT = x[1] - T_ref
        return w * dT * dT

    return ProblemDefinition(
        n_states=3, n_controls=1, horizon=spec.horizon, initial_state=spec.initial_state,
        dynamics=step,
        stage_cost=stage_cost,
        terminal_cost=lambda x: 0.0,
        stage_ineq=lambda k, x, u: bounds(u),
        terminal_eq=lambda x: _vec(x[1] - target),
        name="cstr",
        vectorized=True,
    )


# car parking -------------------------------------------------------------

PARKING = BenchmarkSpec(
    name="parking",
    horizon=500,
    step=0.03,
    initial_state=(1.0, 1.0, 3 * np.pi / 2, 0.0),
    control_lower=(-0.5, -2.0),
    control_upper=(0.5, 2.0),
    terminal_target=None,
    guess="normal",
    guess_params=(0.0, 1.0),
    params=dict(d=2.0),
    solver=dict(value_blocks="regularized", eps_tau=0.3),
)


def smooth_abs(y, z):
    """``sqrt(y^2 + z^2) - z``: a smooth stand-in for ``|y|`` with curvature ``1/z`` at 0."""
    return np.sqrt(y * y + z * z) - z


def rolling_distance(v, w, h, d):
    return d + h * v * np.cos(w) - np.sqrt(d * d - h * h * v * v * np.sin(w) ** 2)


def make_parking(spec: BenchmarkSpec = PARKING) -> ProblemDefinition:
    h, d = spec.step, spec.params["d"]
    bounds = box_constraints(spec.control_lower, spec.control_upper)

    def dynamics(k, x, u):
        b = rolling_distance(x[3], u[0], h, d)
        return _vec(
            x[0] + b * np.cos(x[2]),
            x[1] + b * np.sin(x[2]),
            x[2] + np.arcsin(h * x[3] * np.sin(u[0]) / d),
            x[3] + h * u[1],
        )

    def stage_cost(k, x, u):
        return (
            0.001 * smooth_abs(x[0], 0.1) + 0.001 * smooth_abs(x[1], 0.1)
            + 0.01 * u[0] * u[0] + 0.0001 * u[1] * u[1]
        )

    def terminal_cost(x):
        return (
            0.1 * smooth_abs(x[0], 0.01) + 0.1 * smooth_abs(x[1], 0.01)
            + smooth_abs(x[2], 0.01) + 0.3 * smooth_abs(x[3], 1.0)
        )

    return ProblemDefinition(
        n_states=4, n_controls=2, horizon=spec.horizon, initial_state=spec.initial_state,
        dynamics=dynamics,
        stage_cost=stage_cost,
        terminal_cost=terminal_cost,
        stage_ineq=lambda k, x, u: bounds(u),
        name="parking",
        vectorized=True,
    )


# obstacle avoidance ------------------------------------------------------

OBSTACLE = BenchmarkSpec(
    name="obstacle",
    horizon=200,
    step=0.03,
    initial_state=(0.0, 0.0, 0.0, 0.0),
    control_lower=(-np.pi / 2, -10.0),
    control_upper=(np.pi / 2, 10.0),
    terminal_target=(3.0, 3.0, np.pi / 2, 0.0),
    guess="uniform",
    guess_params=(-0.01, 0.01),
    params=dict(centers=((1.0, 1.0), (1.0, 2.5), (2.5, 2.5)), radius=0.5, control_weight=1e-4),
    solver=dict(
        value_blocks="regularized", slack_reset=True, eps_tau=100.0, eps_theta=1e-6,
        lambda_reg_cap=1e-2, max_line_search_iters=60,
    ),
)


def make_obstacle(spec: BenchmarkSpec = OBSTACLE) -> ProblemDefinition:
    h = spec.step
    bounds = box_constraints(spec.control_lower, spec.control_upper)
    centers = spec.params["centers"]
    r2 = spec.params["radius"] ** 2
    c = spec.params["control_weight"]
    target = np.asarray(spec.terminal_target)

    def dynamics(k, x, u):
        return _vec(
            x[0] + h * x[3] * np.sin(x[2]),
            x[1] + h * x[3] * np.cos(x[2]),
            x[2] + h * u[1] * x[3],
            x[3] + h * u[0],
        )

    def stage_ineq(k, x, u):
        circles = [r2 - (x[0] - cx) ** 2 - (x[1] - cy) ** 2 for cx, cy in centers]
        return _vec(*bounds(u), *circles)

    return ProblemDefinition(
        n_states=4, n_controls=2, horizon=spec.horizon, initial_state=spec.initial_state,
        dynamics=dynamics,
        stage_cost=lambda k, x, u: c * (u[0] * u[0] + u[1] * u[1]),
        terminal_cost=lambda x: 0.0,
        stage_ineq=stage_ineq,
        terminal_eq=lambda x: _vec(*(x[i] - target[i] for i in range(4))),
        name="obstacle",
        vectorized=True,
    )


BENCHMARKS = {
    "pendulum": (PENDULUM, make_pendulum),
    "cstr": (CSTR, make_cstr),
    "parking": (PARKING, make_parking),
    "obstacle": (OBSTACLE, make_obstacle),
}


def get_benchmark(name: str, seed: int | None = None, **overrides):
    """Return ``(problem, initial_controls, spec)`` for a registered benchmark.

    ``overrides`` replace ``BenchmarkSpec`` fields; unknown keys are looked up
    in ``spec.params``.
    """
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    spec, make = BENCHMARKS[name]
    top = {k: v for k, v in overrides.items() if k in BenchmarkSpec.__dataclass_fields__}
    extra = {k: v for k, v in overrides.items() if k not in top}
    if extra:
        unknown = set(extra) - set(spec.params)
        if unknown:
            raise KeyError(f"unknown override(s) for {name}: {', '.join(sorted(unknown))}")
        top["params"] = {**spec.params, **extra}
    if seed is not None:
        top["seed"] = seed
    spec = replace(spec, **top)
    problem = make(spec)
    return problem, spec.initial_controls(problem.n_controls), spec
