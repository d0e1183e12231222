"""Path-integral statistical closure for polynomial dynamical systems."""

from .dynsys import DynamicalSystem, make_burgers, make_builtin, make_linear, make_lorenz, make_rotation
from .lagrangian import ClosureLagrangian, ResidualContext, lagrangian_direct, mean_residual, residual_poly
from .pathspace import DiscretePath, McmcConfig, extremal_path, mcmc_sample
from .polymoment import GaussianMoments, Polynomial, gaussian_expectation
from .trialdensity import TrialFamily, TrialPoint, fixed_covariance_family, gaussian_family, monomial_family

__version__ = "0.1.0"

__all__ = [
    "ClosureLagrangian",
    "DiscretePath",
    "DynamicalSystem",
    "GaussianMoments",
    "McmcConfig",
    "Polynomial",
    "ResidualContext",
    "TrialFamily",
    "TrialPoint",
    "extremal_path",
    "fixed_covariance_family",
    "gaussian_expectation",
    "gaussian_family",
    "lagrangian_direct",
    "make_builtin",
    "make_burgers",
    "make_linear",
    "make_lorenz",
    "make_rotation",
    "mcmc_sample",
    "mean_residual",
    "monomial_family",
    "residual_poly",
]
