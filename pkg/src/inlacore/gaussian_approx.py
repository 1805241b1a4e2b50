"""Gaussian approximation of the latent field given the hyperparameters.

Newton iterations on ``log pi(y | x) + log pi(x | theta)``.  Only the
predictor block carries likelihood curvature ``c_i = -d2 log pi(y_i | eta_i)``,
so each step solves ``(Q + diag(c)) x_new = b`` with ``b_eta = g + c * eta``
and ``b_rest = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from . import gmrf
from .errors import ConvergenceError, ValidationError
from .gmrf import CholeskyFactor, SparseSymmetric
from .likelihood import d2loglik_deta2, dloglik_deta, loglik
from .model import LOG_2PI, LatentGaussianModel, assemble_joint_precision

__all__ = ["ConditionalGaussian", "find_conditional_mode", "log_gaussian_density"]

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 20


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """``N(mode, (Q + diag(c))^{-1})`` at a fixed ``theta`` (full hyper vector)."""

    model: LatentGaussianModel
    theta: np.ndarray
    mode: np.ndarray
    curvature: np.ndarray
    factor: CholeskyFactor
    Q_rest: SparseSymmetric
    iterations: int

    @property
    def n(self) -> int:
        return self.mode.size

    @cached_property
    def log_det_precision(self) -> float:
        return gmrf.log_det(self.factor)

    @property
    def log_density_at_mode(self) -> float:
        return -0.5 * self.n * LOG_2PI + 0.5 * self.log_det_precision

    @cached_property
    def marginal_variances(self) -> np.ndarray:
        return gmrf.marginal_variances(self.factor)

    @cached_property
    def precision_at_mode(self) -> SparseSymmetric:
        Q = assemble_joint_precision(self.model, self.theta)
        c = np.zeros(self.n)
        c[: self.model.n_obs] = self.curvature
        return Q.add_diagonal(c)

    def solve(self, b) -> np.ndarray:
        return gmrf.solve(self.factor, b)


def _objective(model, x, theta, Q_rest, obs, y_obs, off):
    eta = x[: model.n_obs][obs] + off
    ll = float(np.sum(loglik(model.likelihood, y_obs, eta, theta)))
    return ll - 0.5 * model.quad_form(x, Q_rest)


def _curvature_terms(model, x, theta, obs, y_obs, off):
    m = model.n_obs
    g = np.zeros(m)
    c = np.zeros(m)
    eta = x[:m][obs] + off
    g[obs] = dloglik_deta(model.likelihood, y_obs, eta, theta)
    c[obs] = -d2loglik_deta2(model.likelihood, y_obs, eta, theta)
    return g, c


def find_conditional_mode(
    model: LatentGaussianModel,
    theta,
    x0: Optional[np.ndarray] = None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
) -> ConditionalGaussian:
    """Mode and precision of the Gaussian approximation to ``pi(x | theta, y)``.

    Each Newton step is accepted only if it does not decrease the objective;
    otherwise it is halved (up to 20 times).  A step that cannot be improved
    by halving means the iterate is already at a numerical optimum.

    Raises
    ------
    ConvergenceError
        If the step size has not dropped below ``tol`` after ``max_iter`` steps.
    NotPositiveDefiniteError
        If ``Q + diag(c)`` is not positive definite (log-concavity violated).
    """
    theta = model._check_theta(theta)
    n, m = model.n_latent, model.n_obs
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (n,):
        raise ValidationError(f"initial latent vector has shape {x.shape}, expected ({n},)")
    Q_rest = model.rest_precision(theta)
    obs = model.observed
    y_obs = model.y[obs]
    off = model.eta_offset[obs]
    args = (theta, Q_rest, obs, y_obs, off)
    f = _objective(model, x, *args)
    steps = 0
    step_norm = np.inf
    for _ in range(max_iter + 1):
        g, c = _curvature_terms(model, x, theta, obs, y_obs, off)
        factor = model.factor_precision(theta, c, Q_rest)
        b = np.zeros(n)
        b[:m] = g + c * x[:m]
        dx = gmrf.solve(factor, b) - x
        step_norm = float(np.max(np.abs(dx))) if n else 0.0
        if step_norm < tol:
            return ConditionalGaussian(model, theta, x + dx, c, factor, Q_rest, steps)
        if steps == max_iter:
            break
        t = 1.0
        for _h in range(MAX_HALVINGS + 1):
            x_new = x + t * dx
            f_new = _objective(model, x_new, *args)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            # no ascent along the Newton direction: already at the optimum
            return ConditionalGaussian(model, theta, x, c, factor, Q_rest, steps)
        x, f = x_new, f_new
        steps += 1
    raise ConvergenceError(
        f"Newton iteration did not converge in {max_iter} steps (last step {step_norm:.3e})",
        residual=step_norm,
    )


def log_gaussian_density(g: ConditionalGaussian, x) -> float:
    """``log pi_G(x | theta, y)`` of the Gaussian approximation."""
    x = np.asarray(x, dtype=float)
    if x.shape != g.mode.shape:
        raise ValidationError("latent vector has the wrong length")
    d = x - g.mode
    quad = g.model.quad_form(d, g.Q_rest, g.curvature)
    return g.log_density_at_mode - 0.5 * quad
