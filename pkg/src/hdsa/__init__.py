"""Post-optimality sensitivity of PDE-constrained optimal control to model discrepancy."""

from .discrepancy import Kron2Mat, MthetaOperator, build_L, build_prior
from .fem import interval_mesh, unit_square_mesh
from .gsvd import GsvdConfig, SensitivityContext, randomized_gsvd
from .optctl import ReducedProblem, make_objective, solve_optimum
from .pde import make_model

__version__ = "0.1.0"

__all__ = [
    "GsvdConfig",
    "Kron2Mat",
    "MthetaOperator",
    "ReducedProblem",
    "SensitivityContext",
    "build_L",
    "build_prior",
    "interval_mesh",
    "make_model",
    "make_objective",
    "randomized_gsvd",
    "solve_optimum",
    "unit_square_mesh",
]
