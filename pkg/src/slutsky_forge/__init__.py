"""Transport-based demand systems with prescribed income-level moments.

Builds pullback transport flows that reproduce a family's conditional demand
distributions, corrects them by divergence-free rotations to reach a chosen
average Slutsky matrix, and tests Slutsky symmetry against elasticity bounds.
"""

__version__ = "0.1.0"

from .errors import (CheckFailed, CompatibilityError, ConfigurationError, DomainError, ForgeError,
                     InconsistencyError, IntegrationError, NumericError, ParseError, RegularityError,
                     UnsupportedError)
from .families import make_family
from .elliptic import EllipticProblem, convergence_check, solve_neumann
from .transport import CompositeFlow, composite_eval, flow_jacobian_fd
from .rotation import RotationCorrection, SlutskyTarget, compute_coeffs, rotation_field
from .identification import estimate_average_slutsky, estimate_functionals, marginal_distance, nonid_demo
from .symmetry import ElasticityBounds, grid_test, interval_compute, moments_ingest

__all__ = [
    "CheckFailed", "CompatibilityError", "CompositeFlow", "ConfigurationError", "DomainError",
    "ElasticityBounds", "EllipticProblem", "ForgeError", "InconsistencyError", "IntegrationError",
    "NumericError", "ParseError", "RegularityError", "RotationCorrection", "SlutskyTarget",
    "UnsupportedError", "composite_eval", "compute_coeffs", "convergence_check",
    "estimate_average_slutsky", "estimate_functionals", "flow_jacobian_fd", "grid_test",
    "interval_compute", "make_family", "marginal_distance", "moments_ingest", "nonid_demo",
    "rotation_field", "solve_neumann",
]
