"""Laplace approximation of the hyperparameter posterior and its mode.

``log pi~(theta | y) = log pi(y | x*) + log pi(x* | theta) + log pi(theta)
- log pi_G(x* | theta, y)`` evaluated at the conditional mode ``x*(theta)``.
All vectors here are the *free* hyperparameters; fixed slots are filled in
by the model.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import norm

from .errors import NumericalError, ValidationError
from .gaussian_approx import ConditionalGaussian, find_conditional_mode
from .marginal import Marginal
from .model import LatentGaussianModel, log_prior_hyper, log_prior_latent

__all__ = [
    "ThetaTarget",
    "ThetaPosterior",
    "log_posterior_theta",
    "find_mode_theta",
    "normalized_theta_marginal",
    "log_marginal_likelihood",
]

HESSIAN_STEP = 0.01
MODE_FTOL = 1e-5
MODE_XTOL = 1e-5
TAIL_DROP = 10.0


def _laplace_value(model: LatentGaussianModel, g: ConditionalGaussian) -> float:
    theta = g.theta
    return (
        model.loglik_sum(g.mode, theta)
        + log_prior_latent(model, g.mode, theta, g.Q_rest)
        + log_prior_hyper(model, theta)
        - g.log_density_at_mode
    )


def log_posterior_theta(model: LatentGaussianModel, theta_free, x0=None) -> float:
    """Unnormalised ``log pi~(theta | y)`` at a free-slot vector."""
    g = find_conditional_mode(model, model.theta_full(theta_free), x0)
    return _laplace_value(model, g)


class ThetaTarget:
    """Memoised ``log pi~(theta | y)`` with Newton warm starts.

    Every evaluation is recorded in :attr:`evaluations` as ``(theta, value)``.
    With ``warm_start`` the Newton iteration for a new ``theta`` starts from
    the conditional mode of the previous one; :meth:`evaluate_many` instead
    starts every point from a fixed anchor so that results do not depend on
    evaluation order or thread count.
    """

    def __init__(self, model: LatentGaussianModel, warm_start: bool = True):
        self.model = model
        self.warm_start = warm_start
        self._cache: dict = {}
        self._last_mode: Optional[np.ndarray] = None
        self._lock = threading.Lock()
        self.evaluations: list = []

    @staticmethod
    def _key(theta):
        return tuple(float(t) for t in np.atleast_1d(theta))

    def _compute(self, theta, x0):
        g = find_conditional_mode(self.model, self.model.theta_full(theta), x0)
        return _laplace_value(self.model, g), g

    def _store(self, key, value, g):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = (value, g)
                self.evaluations.append((np.array(key), value))
            return self._cache[key]

    def conditional(self, theta) -> ConditionalGaussian:
        key = self._key(theta)
        if key not in self._cache:
            self(theta)
        return self._cache[key][1]

    def __call__(self, theta) -> float:
        key = self._key(theta)
        hit = self._cache.get(key)
        if hit is not None:
            return hit[0]
        x0 = self._last_mode if self.warm_start else None
        value, g = self._compute(np.array(key), x0)
        self._last_mode = g.mode
        return self._store(key, value, g)[0]

    def evaluate_many(self, thetas, anchor: Optional[np.ndarray] = None, threads: int = 1) -> np.ndarray:
        """Evaluate a batch, each Newton run started from ``anchor``."""
        keys = [self._key(t) for t in thetas]
        todo = [k for k in dict.fromkeys(keys) if k not in self._cache]

        def work(k):
            return k, self._compute(np.array(k), anchor)

        if threads > 1 and len(todo) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, todo))
        else:
            results = [work(k) for k in todo]
        for k, (value, g) in results:
            self._store(k, value, g)
        return np.array([self._cache[k][0] for k in keys])


@dataclass(eq=False)
class ThetaPosterior:
    """Mode, curvature and standardising map of ``log pi~(theta | y)``.

    ``V`` maps standardised coordinates to ``theta = mode + V z``; it is
    ``U Lambda^{-1/2}`` from the eigendecomposition of the negative Hessian
    at the mode, or the identity when that Hessian is not positive definite.
    """

    mode: np.ndarray
    log_post_mode: float
    hessian: np.ndarray
    V: np.ndarray
    hessian_ok: bool
    target: Callable
    nm_iterations: int = 0

    @property
    def dim(self) -> int:
        return self.mode.size

    def theta_of(self, z) -> np.ndarray:
        return self.mode + self.V @ np.asarray(z, dtype=float)

    @property
    def evaluations(self) -> list:
        return list(getattr(self.target, "evaluations", []))

    @property
    def covariance(self) -> np.ndarray:
        return self.V @ self.V.T

    @property
    def log_det_V(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(np.linalg.slogdet(self.V)[1])


def _fd_hessian(f, x, h):
    d = x.size
    f0 = f(x)
    H = np.empty((d, d))
    E = np.eye(d) * h
    for i in range(d):
        fp, fm = f(x + E[i]), f(x - E[i])
        H[i, i] = (fp - 2.0 * f0 + fm) / h ** 2
        for j in range(i):
            val = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
            H[i, j] = H[j, i] = val
    return H


def find_mode_theta(target, init=None, step: float = 0.5, max_restarts: int = 5) -> ThetaPosterior:
    """Maximise ``target`` (a log density in theta) by Nelder-Mead and measure its curvature.

    ``target`` is a :class:`LatentGaussianModel` (wrapped in a
    :class:`ThetaTarget`) or any callable mapping a free-slot vector to a
    log density.  ``init`` defaults to the model's initial values.

    The simplex search is restarted from its own result until a restart no
    longer improves the value by more than the tolerance.  The Hessian is a
    central finite difference with step 0.01.
    """
    if isinstance(target, LatentGaussianModel):
        if init is None:
            init = target.initial_theta()
        target = ThetaTarget(target)
    if init is None:
        raise ValidationError("initial hyperparameters required for a callable target")
    x = np.atleast_1d(np.asarray(init, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValidationError("initial hyperparameters must be finite")
    d = x.size
    if d == 0:
        v = float(target(x))
        return ThetaPosterior(x, v, np.zeros((0, 0)), np.zeros((0, 0)), True, target)

    def neg(t):
        v = target(t)
        return np.inf if not np.isfinite(v) else -v

    best = neg(x)
    nit = 0
    for _ in range(max_restarts + 1):
        simplex = np.vstack([x, x + step * np.eye(d)])
        res = minimize(neg, x, method="Nelder-Mead",
                       options={"initial_simplex": simplex, "xatol": MODE_XTOL, "fatol": MODE_FTOL,
                                "maxiter": 400 * d, "maxfev": 800 * d})
        nit += int(res.nit)
        improved = best - res.fun
        if res.fun <= best:
            x, best = np.asarray(res.x, dtype=float), float(res.fun)
        step = max(10 * MODE_XTOL, step / 4)
        if improved <= MODE_FTOL:
            break
    if not np.isfinite(best):
        raise NumericalError("hyperparameter posterior is not finite anywhere on the search path")
    H = -_fd_hessian(lambda t: target(t), x, HESSIAN_STEP)
    H = 0.5 * (H + H.T)
    w, U = np.linalg.eigh(H)
    ok = bool(np.all(w > 0) and np.all(np.isfinite(w)))
    V = U / np.sqrt(w) if ok else np.eye(d)
    return ThetaPosterior(x, -best, H, V, ok, target, nm_iterations=nit)


def log_marginal_likelihood(support) -> float:
    """``log sum_k exp(log pi~(theta_k | y)) Delta_k`` over integration points."""
    lp = np.array([p.log_post for p in support], dtype=float)
    w = np.array([p.weight for p in support], dtype=float)
    if lp.size == 0:
        raise ValidationError("empty support")
    return float(logsumexp(lp + np.log(w)))


def _thin(xs, vals, min_gap):
    keep_x, keep_v = [xs[0]], [vals[0]]
    for a, v in zip(xs[1:], vals[1:]):
        if a - keep_x[-1] >= min_gap:
            keep_x.append(a)
            keep_v.append(v)
        elif v > keep_v[-1]:
            keep_x[-1], keep_v[-1] = a, v
    return np.array(keep_x), np.array(keep_v)


def _tail_end(f, x0, direction, scale, top):
    """Walk outward from ``x0`` until ``f`` is ``TAIL_DROP`` below ``top`` or stops decreasing."""
    h = 0.05 * scale
    prev = f(x0)
    x = x0
    for _ in range(400):
        xn = x + direction * h
        v = f(xn)
        if v < top - TAIL_DROP:
            return xn
        if v >= prev:
            return x
        x, prev = xn, v
    return x


def normalized_theta_marginal(tp: ThetaPosterior, slot: int, support=None, n_points: int = 201) -> Marginal:
    """Posterior marginal of one free hyperparameter on the log-precision scale.

    One dimension: the log density is written as the Gaussian implied by the
    Hessian at the mode plus a residual; a not-a-knot cubic spline goes
    through the residual at every recorded evaluation (thinned to a minimum
    spacing so that finite-difference stencils do not make the spline
    oscillate) and is extended linearly beyond the outermost evaluations.
    The grid stops where the log density is 10 units below its maximum.
    Without a usable Hessian the residual is the log density itself.

    Several dimensions: an approximation that places a Gaussian kernel at
    each support point with the point's normalised weight and sums over
    points, with bandwidth half the grid spacing along the slot.
    """
    if not 0 <= slot < tp.dim:
        raise ValidationError(f"slot {slot} outside [0, {tp.dim})")
    if tp.dim == 1:
        ev = tp.evaluations
        if support is not None:
            ev = ev + [(np.atleast_1d(p.theta), p.log_post) for p in support]
        pts = sorted({float(t[0]): float(v) for t, v in ev}.items())
        xs = np.array([p[0] for p in pts])
        vs = np.array([p[1] for p in pts])
        scale = abs(tp.V[0, 0])
        xs, vs = _thin(xs, vs, 0.1 * scale)
        if xs.size < 4:
            raise NumericalError("too few hyperparameter evaluations for a marginal")
        mode = float(tp.mode[0])
        curv = float(tp.hessian[0, 0]) if tp.hessian_ok else 0.0

        def quad(x):
            return -0.5 * curv * (np.asarray(x) - mode) ** 2

        res = vs - quad(xs)
        spline = CubicSpline(xs, res, bc_type="not-a-knot")
        lo_slope = (res[1] - res[0]) / (xs[1] - xs[0])
        hi_slope = (res[-1] - res[-2]) / (xs[-1] - xs[-2])

        def logd(x):
            x = np.asarray(x, dtype=float)
            r = np.where(x < xs[0], res[0] + lo_slope * (x - xs[0]),
                         np.where(x > xs[-1], res[-1] + hi_slope * (x - xs[-1]), spline(np.clip(x, xs[0], xs[-1]))))
            return quad(x) + r

        top = float(vs.max())
        lo = _tail_end(logd, xs[0], -1.0, scale, top) if logd(xs[0]) > top - TAIL_DROP else xs[0]
        hi = _tail_end(logd, xs[-1], 1.0, scale, top) if logd(xs[-1]) > top - TAIL_DROP else xs[-1]
        grid = np.linspace(lo, hi, n_points)
        return Marginal.from_log_density(grid, logd(grid))
    if support is None:
        raise ValidationError("multi-dimensional hyperparameter marginals need the integration support")
    thetas = np.array([p.theta for p in support])[:, slot]
    w = np.array([p.weight for p in support]) * np.exp(
        np.array([p.log_post for p in support]) - max(p.log_post for p in support))
    w = w / w.sum()
    step = float(getattr(support[0], "step", 1.0) or 1.0)
    bw = 0.5 * step * float(np.sqrt(np.sum(tp.V[slot] ** 2)))
    lo = thetas.min() - 5 * bw
    hi = thetas.max() + 5 * bw
    grid = np.linspace(lo, hi, n_points)
    dens = (w[None, :] * norm.pdf(grid[:, None], thetas[None, :], bw)).sum(axis=1)
    return Marginal(grid, dens).normalized()
