"""Interior-point differential dynamic programming for constrained optimal control."""

from .core import (
    CappedTau,
    IterationRecord,
    ProblemDefinition,
    SolverConfig,
    Trajectory,
    initialize_variables,
    merit_phi,
    rollout,
    violation_theta,
)
from .problems import get_benchmark, make_cstr, make_obstacle, make_parking, make_pendulum
from .solver import SolveResult, barrier_converged, solve, update_tau

__version__ = "0.1.0"

__all__ = [
    "CappedTau",
    "IterationRecord",
    "ProblemDefinition",
    "SolveResult",
    "SolverConfig",
    "Trajectory",
    "barrier_converged",
    "get_benchmark",
    "initialize_variables",
    "make_cstr",
    "make_obstacle",
    "make_parking",
    "make_pendulum",
    "merit_phi",
    "rollout",
    "solve",
    "update_tau",
    "violation_theta",
]
