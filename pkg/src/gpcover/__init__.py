"""Uncertainty-guaranteed informative path planning with Gaussian processes."""

from gpcover.coverage import CoverageMatrix, TargetSpec, build_matrix, covariance_threshold
from gpcover.environment import Environment, Polygon, discretize, load_environment, repair_segment
from gpcover.errors import GpCoverError
from gpcover.gp import GpModel, KernelSpec, LengthscaleGrid, fit, load_kernel, save_kernel
from gpcover.planners import Plan, RoutingConfig, plan_gcb, plan_greedy, plan_hex, verify_guarantee
from gpcover.routing import DistanceOracle, Route, solve_tsp

__version__ = "0.1.0"

__all__ = [
    "CoverageMatrix", "DistanceOracle", "Environment", "GpCoverError", "GpModel", "KernelSpec",
    "LengthscaleGrid", "Plan", "Polygon", "Route", "RoutingConfig", "TargetSpec", "build_matrix",
    "covariance_threshold", "discretize", "fit", "load_environment", "load_kernel", "plan_gcb",
    "plan_greedy", "plan_hex", "repair_segment", "save_kernel", "solve_tsp", "verify_guarantee",
]
