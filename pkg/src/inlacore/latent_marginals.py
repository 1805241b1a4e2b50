"""Posterior marginals of single latent elements.

``gaussian_latent_marginal`` reads the mean and variance off the Gaussian
approximation.  ``laplace_latent_marginal`` clamps the element at each of a
few values, re-optimises the rest of the field and evaluates the Laplace
ratio, which corrects location and skewness.  ``mix_marginals`` combines the
conditional marginals over the hyperparameter support.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import CubicSpline

from . import gmrf
from .errors import ConvergenceError, NotPositiveDefiniteError, NumericalError, ValidationError
from .gaussian_approx import ConditionalGaussian
from .likelihood import d2loglik_deta2, dloglik_deta, loglik
from .marginal import Marginal
from .marginal_utils import density_at
from .model import log_prior_latent

__all__ = [
    "gaussian_latent_marginal",
    "laplace_latent_marginal",
    "mix_marginals",
    "LATENT_GRID_POINTS",
    "LAPLACE_EVAL_POINTS",
]

LATENT_GRID_POINTS = 75
LAPLACE_EVAL_POINTS = 15
LAPLACE_MIN_POINTS = 7
HALF_WIDTH_SD = 5.0
MIX_GRID_POINTS = 201


def _check_index(g: ConditionalGaussian, i: int) -> int:
    i = int(i)
    if not 0 <= i < g.n:
        raise ValidationError(f"latent index {i} outside [0, {g.n})")
    return i


def _output_grid(g: ConditionalGaussian, i: int, points: int):
    mu = float(g.mode[i])
    sd = float(np.sqrt(g.marginal_variances[i]))
    return mu, sd, np.linspace(mu - HALF_WIDTH_SD * sd, mu + HALF_WIDTH_SD * sd, points)


def gaussian_latent_marginal(g: ConditionalGaussian, i: int, points: int = LATENT_GRID_POINTS) -> Marginal:
    """``N(mode_i, Sigma_ii)`` tabulated on ``mode_i +- 5 sd``."""
    i = _check_index(g, i)
    mu, sd, xs = _output_grid(g, i, points)
    return Marginal.from_log_density(xs, -0.5 * ((xs - mu) / sd) ** 2)


def _clamped_mode(g, i, v, x_start, sigma_col, max_iter=50, tol=1e-8):
    """Mode of ``pi(x_{-i} | x_i = v, theta, y)`` and ``log |P_{-i,-i}|`` there.

    The constrained Newton step is the unconstrained one corrected by
    conditioning on ``x_i = v`` (kriging with ``P^{-1} e_i``), so no reduced
    matrix is ever formed; ``|P_{-i,-i}| = |P| (P^{-1})_{ii}``.
    """
    model, theta = g.model, g.theta
    m, n = model.n_obs, g.n
    obs = model.observed
    y_obs = model.y[obs]
    off = model.eta_offset[obs]
    Q_rest = g.Q_rest
    x = x_start.copy()
    x[i] = v

    def objective(z):
        eta = z[:m][obs] + off
        return float(np.sum(loglik(model.likelihood, y_obs, eta, theta))) - 0.5 * model.quad_form(z, Q_rest)

    f = objective(x)
    linear = model.likelihood.kind == "gaussian"
    for it in range(max_iter + 1):
        c = np.zeros(m)
        grad = np.zeros(m)
        eta = x[:m][obs] + off
        grad[obs] = dloglik_deta(model.likelihood, y_obs, eta, theta)
        c[obs] = -d2loglik_deta2(model.likelihood, y_obs, eta, theta)
        if linear and it == 0:
            factor, col = g.factor, sigma_col
        else:
            factor = model.factor_precision(theta, c, Q_rest)
            e = np.zeros(n)
            e[i] = 1.0
            col = gmrf.solve(factor, e)
        b = np.zeros(n)
        b[:m] = grad + c * x[:m]
        xu = gmrf.solve(factor, b)
        xc = xu - col * (xu[i] - v) / col[i]
        xc[i] = v
        dx = xc - x
        step = float(np.max(np.abs(dx)))
        if step < tol:
            x = xc
            return x, gmrf.log_det(factor) + np.log(col[i]), c
        if it == max_iter:
            break
        t = 1.0
        for _ in range(21):
            xn = x + t * dx
            fn = objective(xn)
            if np.isfinite(fn) and fn >= f - 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            return x, gmrf.log_det(factor) + np.log(col[i]), c
        x, f = xn, fn
    raise ConvergenceError(f"clamped Newton iteration for element {i} did not converge", residual=step)


def laplace_latent_marginal(
    g: ConditionalGaussian,
    i: int,
    grid=None,
    eval_points: int = LAPLACE_EVAL_POINTS,
    points: int = LATENT_GRID_POINTS,
) -> Marginal:
    """Laplace approximation to ``pi(x_i | theta, y)``.

    At each evaluation value ``v`` the rest of the field is re-optimised with
    ``x_i`` clamped to ``v`` and
    ``log pi(y | x) + log pi(x | theta) - log pi_G(x_{-i} | x_i, theta, y)``
    is evaluated there.  Evaluation values are ``grid`` when given, else
    ``eval_points`` values spanning ``mode_i +- 5 sd``.  The log density is
    interpolated by a not-a-knot cubic spline onto the output grid.  Points
    whose inner optimisation fails are dropped.
    """
    i = _check_index(g, i)
    model, theta = g.model, g.theta
    mu, sd, xs = _output_grid(g, i, points)
    if grid is None:
        vs = np.linspace(mu - HALF_WIDTH_SD * sd, mu + HALF_WIDTH_SD * sd, eval_points)
    else:
        vs = np.unique(np.asarray(grid, dtype=float))
        if vs.size < LAPLACE_MIN_POINTS:
            raise ValidationError(f"Laplace evaluation grid needs at least {LAPLACE_MIN_POINTS} values")
    e = np.zeros(g.n)
    e[i] = 1.0
    sigma_col = g.solve(e)
    n_minus = g.n - 1
    kept_v, kept_l = [], []
    order = np.argsort(np.abs(vs - mu), kind="stable")
    starts = {}
    for k in order:
        v = vs[k]
        nb = k - 1 if v > mu else k + 1
        x_start = starts.get(nb, g.mode)
        try:
            x, logdet_minus, _c = _clamped_mode(g, i, v, x_start, sigma_col)
        except (ConvergenceError, NotPositiveDefiniteError):
            continue
        starts[k] = x
        val = (model.loglik_sum(x, theta) + log_prior_latent(model, x, theta, g.Q_rest)
               + 0.5 * n_minus * np.log(2 * np.pi) - 0.5 * logdet_minus)
        if np.isfinite(val):
            kept_v.append(v)
            kept_l.append(val)
    if len(kept_v) < LAPLACE_MIN_POINTS:
        raise NumericalError(f"Laplace marginal of element {i}: only {len(kept_v)} of {vs.size} "
                             "evaluation points converged")
    idx = np.argsort(kept_v)
    kv, kl = np.array(kept_v)[idx], np.array(kept_l)[idx]
    spline = CubicSpline(kv, kl, bc_type="not-a-knot")
    lv = spline(xs)
    # outside the surviving evaluation range extend linearly
    lo_s = (kl[1] - kl[0]) / (kv[1] - kv[0])
    hi_s = (kl[-1] - kl[-2]) / (kv[-1] - kv[-2])
    lv = np.where(xs < kv[0], kl[0] + lo_s * (xs - kv[0]), lv)
    lv = np.where(xs > kv[-1], kl[-1] + hi_s * (xs - kv[-1]), lv)
    return Marginal.from_log_density(xs, lv)


def mix_marginals(parts, points: int = MIX_GRID_POINTS) -> Marginal:
    """Weighted mixture of marginals on a common grid spanning all parts.

    ``parts`` is a sequence of ``(Marginal, weight)``; weights need not be
    normalised.
    """
    parts = [(float(w), m) for m, w in parts]
    if not parts:
        raise ValidationError("nothing to mix")
    if any(w < 0 for w, _ in parts) or sum(w for w, _ in parts) <= 0:
        raise ValidationError("mixture weights must be nonnegative with a positive sum")
    lo = min(m.xs[0] for _, m in parts)
    hi = max(m.xs[-1] for _, m in parts)
    xs = np.linspace(lo, hi, points)
    total = sum(w for w, _ in parts)
    ds = np.zeros(points)
    for w, m in parts:
        if w > 0:
            ds += (w / total) * np.asarray(density_at(m.normalized(), xs))
    return Marginal(xs, ds).normalized()
