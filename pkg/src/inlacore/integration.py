"""Support points and weights for integrating over the hyperparameters.

Three designs in the standardised coordinates ``z`` (``theta = mode + V z``):

* ``grid``: walk each axis in both directions with a fixed step until the
  log density has dropped by more than the cutoff, then take the Cartesian
  product of the per-axis points.  All points get the same area weight.
* ``ccd``: the centre plus a central composite design on a sphere of radius
  ``f0 * sqrt(d)``; weights follow from integrating a standard Gaussian.
* ``eb``: the mode alone (empirical Bayes plug-in).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .hyper_posterior import ThetaPosterior

__all__ = [
    "SupportPoint",
    "grid_strategy",
    "ccd_strategy",
    "eb_strategy",
    "integration_points",
    "normalized_weights",
    "STRATEGIES",
    "MAX_GRID_POINTS",
]

MAX_GRID_POINTS = 10_000
CCD_F0 = 1.1
STRATEGIES = ("grid", "ccd", "eb", "auto")


@dataclass(frozen=True, eq=False)
class SupportPoint:
    """One integration node: free hyperparameters, standardised coordinates,
    unnormalised log posterior and integration weight ``Delta``."""

    theta: np.ndarray
    z: np.ndarray
    log_post: float
    weight: float
    step: float = 1.0


def _evaluate(tp: ThetaPosterior, zs, anchor, threads):
    thetas = [tp.theta_of(z) for z in zs]
    many = getattr(tp.target, "evaluate_many", None)
    if many is not None:
        vals = many(thetas, anchor=anchor, threads=threads)
    else:
        vals = np.array([tp.target(t) for t in thetas])
    return thetas, np.asarray(vals, dtype=float)


def _anchor(tp: ThetaPosterior):
    cond = getattr(tp.target, "conditional", None)
    return None if cond is None or tp.dim == 0 else cond(tp.mode).mode


def _single(tp: ThetaPosterior) -> list:
    return [SupportPoint(tp.mode.copy(), np.zeros(tp.dim), float(tp.log_post_mode), 1.0)]


def eb_strategy(tp: ThetaPosterior) -> list:
    return _single(tp)


def grid_strategy(tp: ThetaPosterior, step: float = 1.0, cutoff: float = 2.5,
                  threads: int = 1, max_points: int = MAX_GRID_POINTS) -> list:
    """Regular grid in ``z``; raises :class:`NumericalError` beyond ``max_points`` nodes."""
    if not step > 0 or not cutoff > 0:
        raise ValidationError("grid step and cutoff must be positive")
    d = tp.dim
    if d == 0:
        return _single(tp)
    anchor = _anchor(tp)
    top = tp.log_post_mode
    axes = []
    max_walk = int(np.ceil(np.sqrt(2.0 * max_points) / step)) + 50
    for a in range(d):
        ks = [0]
        for sign in (1, -1):
            k = 1
            while True:
                if k > max_walk:
                    raise NumericalError(f"grid walk along axis {a} did not reach the cutoff; "
                                         "the hyperparameter mode is probably wrong")
                z = np.zeros(d)
                z[a] = sign * k * step
                _, v = _evaluate(tp, [z], anchor, 1)
                if top - v[0] > cutoff:
                    break
                ks.append(sign * k)
                k += 1
        axes.append(sorted(ks))
    count = int(np.prod([len(ax) for ax in axes]))
    if count > max_points:
        raise NumericalError(f"grid would need {count} points (limit {max_points})")
    zs = [np.array(c, dtype=float) * step for c in itertools.product(*axes)]
    thetas, vals = _evaluate(tp, zs, anchor, threads)
    w = step ** d * abs(np.linalg.det(tp.V))
    return [SupportPoint(t, z, float(v), float(w), float(step)) for t, z, v in zip(thetas, zs, vals)]


def _log_std_normal_density_at_radius(d, r):
    return -0.5 * d * np.log(2 * np.pi) - 0.5 * r * r


def _ccd_design(d: int) -> np.ndarray:
    """Unit-cube factorial corners: full for d <= 4, half fraction with
    ``x_d = x_1 x_2 ... x_{d-1}`` beyond."""
    if d <= 4:
        return np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    base = np.array(list(itertools.product((-1.0, 1.0), repeat=d - 1)))
    return np.hstack([base, np.prod(base, axis=1, keepdims=True)])


def ccd_strategy(tp: ThetaPosterior, f0: float = CCD_F0, threads: int = 1) -> list:
    """Central composite design; dimension one falls back to the grid."""
    d = tp.dim
    if d == 0:
        return _single(tp)
    if d == 1:
        return grid_strategy(tp, threads=threads)
    r = np.sqrt(d) * f0
    corners = _ccd_design(d) / np.sqrt(d)
    axial = np.vstack([np.eye(d), -np.eye(d)])
    shell = np.vstack([corners, axial]) * r
    ns = shell.shape[0]
    detV = abs(np.linalg.det(tp.V))
    w_shell = d / (ns * r * r * np.exp(_log_std_normal_density_at_radius(d, r))) * detV
    w_centre = (1.0 - d / (r * r)) / np.exp(_log_std_normal_density_at_radius(d, 0.0)) * detV
    anchor = _anchor(tp)
    zs = [np.zeros(d)] + list(shell)
    thetas, vals = _evaluate(tp, zs, anchor, threads)
    weights = [w_centre] + [w_shell] * ns
    return [SupportPoint(t, z, float(v), float(w)) for t, z, v, w in zip(thetas, zs, vals, weights)]


def integration_points(tp: ThetaPosterior, strategy: str = "auto", step: float = 1.0,
                       cutoff: float = 2.5, threads: int = 1) -> list:
    """Dispatch by name; ``auto`` uses the grid up to two dimensions and CCD above."""
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown integration strategy {strategy!r}")
    if strategy == "auto":
        strategy = "grid" if tp.dim <= 2 else "ccd"
    if strategy == "eb":
        return eb_strategy(tp)
    if strategy == "ccd":
        return ccd_strategy(tp, threads=threads)
    return grid_strategy(tp, step=step, cutoff=cutoff, threads=threads)


def normalized_weights(points) -> np.ndarray:
    """``pi~(theta_k | y) Delta_k`` rescaled to sum to one."""
    lw = np.array([p.log_post + np.log(p.weight) for p in points], dtype=float)
    w = np.exp(lw - lw.max())
    return w / w.sum()
