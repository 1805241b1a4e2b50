"""Exception hierarchy shared by the engine and the command line front end."""


class InlaError(Exception):
    """Base class for all errors raised by :mod:`inlacore`."""


class ValidationError(InlaError, ValueError):
    """Invalid model, data or argument supplied by the caller."""


class NumericalError(InlaError, ArithmeticError):
    """A numerical routine failed (non-PD matrix, non-convergence, ...)."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky pivot fell below the positive-definiteness threshold.

    Attributes
    ----------
    index : int
        Index (in the caller's original ordering) of the failing pivot.
    pivot : float
        Value of the rejected pivot.
    """

    def __init__(self, index, pivot):
        super().__init__(f"matrix is not positive definite: pivot {pivot:.3e} at index {index}")
        self.index = int(index)
        self.pivot = float(pivot)


class ConvergenceError(NumericalError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class MultimodalMarginalError(InlaError, ValueError):
    """A density threshold produced a disjoint set (HPD of a multimodal marginal)."""

    def __init__(self, segments):
        seg = ", ".join(f"[{a:.6g}, {b:.6g}]" for a, b in segments)
        super().__init__(f"marginal is not unimodal; HPD set has segments {seg}")
        self.segments = list(segments)
