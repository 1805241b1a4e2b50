"""Integrated nested Laplace approximations for latent Gaussian models."""

from .errors import (
    ConvergenceError,
    InlaError,
    MultimodalMarginalError,
    NotPositiveDefiniteError,
    NumericalError,
    ValidationError,
)

__version__ = "0.1.0"
