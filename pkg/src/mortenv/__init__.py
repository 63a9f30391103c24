"""Two-stage weekly mortality modelling with environmental drivers.

A spatially smoothed Serfling-type Poisson baseline gives expected deaths per
region-week; a Poisson gradient-boosting model on engineered environmental
features learns a multiplier on top of it.
"""
from .exceptions import ConvergenceError, NumericalError, ValidationError

__version__ = "0.1.0"

__all__ = ["ConvergenceError", "NumericalError", "ValidationError", "__version__"]
