"""Numerical verification toolkit for hypocoercive decay of kinetic Langevin dynamics."""
from .errors import (CertificationInfeasible, CFLViolationError, ConfigError, ContractViolation,
                     DataQualityError, DivergenceError, GridTooSmallError, HypocertError,
                     InapplicableError, SolverError, UnsupportedOperation)
from .model import (ModelSpec, PerturbedHarmonic, Equilibrium, Custom, PhasePoint, ZeroPerturbation,
                    TrigPerturbation, BumpPerturbation, QuadraticPotential, QuadraticCosPotential,
                    drift_bounds, eval_drift, eval_jacobian)

__version__ = "0.1.0"
