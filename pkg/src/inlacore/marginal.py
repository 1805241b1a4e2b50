"""Tabulated univariate densities."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ValidationError

__all__ = ["Marginal", "MIN_POINTS"]

MIN_POINTS = 9


@dataclass(frozen=True, eq=False)
class Marginal:
    """A density tabulated on a strictly increasing grid.

    Attributes
    ----------
    xs : ndarray
        Grid, strictly increasing, at least nine points.
    ds : ndarray
        Nonnegative density values at ``xs``.
    """

    xs: np.ndarray
    ds: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float).ravel()
        ds = np.asarray(self.ds, dtype=float).ravel()
        if xs.size != ds.size:
            raise ValidationError("grid and density have different lengths")
        if xs.size < MIN_POINTS:
            raise ValidationError(f"a marginal needs at least {MIN_POINTS} grid points, got {xs.size}")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ds))):
            raise ValidationError("marginal contains non-finite values")
        if np.any(np.diff(xs) <= 0):
            raise ValidationError("marginal grid must be strictly increasing")
        if np.any(ds < 0):
            raise ValidationError("marginal density must be nonnegative")
        if not np.any(ds > 0):
            raise ValidationError("marginal density is identically zero")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ds", ds)

    @classmethod
    def from_log_density(cls, xs, log_ds) -> "Marginal":
        log_ds = np.asarray(log_ds, dtype=float)
        return cls(xs, np.exp(log_ds - np.max(log_ds))).normalized()

    def integral(self) -> float:
        return float(np.trapezoid(self.ds, self.xs))

    def normalized(self) -> "Marginal":
        return Marginal(self.xs, self.ds / self.integral())

    @cached_property
    def log_spline(self):
        from scipy.interpolate import CubicSpline

        if np.all(self.ds > 0):
            return CubicSpline(self.xs, np.log(self.ds), bc_type="not-a-knot")
        return None

    def __len__(self) -> int:
        return self.xs.size

    def save(self, path) -> None:
        """Two-column text file, full precision, one ``x density`` pair per line."""
        with open(path, "w") as fh:
            for a, b in zip(self.xs, self.ds):
                fh.write(f"{float(a)!r} {float(b)!r}\n")

    @classmethod
    def load(cls, path) -> "Marginal":
        try:
            data = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise ValidationError(f"cannot parse marginal file {path}: {exc}") from None
        if data.shape[1] != 2:
            raise ValidationError(f"marginal file {path} must have two columns")
        return cls(data[:, 0], data[:, 1])
