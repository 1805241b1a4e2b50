"""Shared models and dense reference computations."""

import os

import numpy as np
import pytest

from inlacore.likelihood import gaussian_hyper, poisson
from inlacore.model import HyperPrior, HyperSlot, LatentComponent, LatentGaussianModel

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "src", "inlacore", "data")
SALM_SPEC = os.path.abspath(os.path.join(DATA_DIR, "salm.yaml"))
SALM_CSV = os.path.abspath(os.path.join(DATA_DIR, "salm.csv"))


def rw2_gaussian_model(T=15, seed=0, missing=()):
    """Noisy smooth curve observed once per node, with an unknown noise precision."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, T)
    y = np.sin(2 * np.pi * t) + 0.3 * rng.standard_normal(T)
    y[list(missing)] = np.nan
    hyper = (HyperSlot("Precision for the Gaussian observations", HyperPrior.log_gamma(1.0, 5e-5), 2.0),
             HyperSlot("Precision for f", HyperPrior.log_gamma(1.0, 5e-5), 4.0))
    comps = (LatentComponent.rw2("f", np.arange(T), 1),)
    return LatentGaussianModel(comps, gaussian_hyper(0), y, hyper)


def dense_rw2_pieces(model, theta):
    """``(B, Q_rest)`` rebuilt with dense numpy for a single-rw2 model."""
    c = model.components[0]
    T = c.size
    m = model.n_obs
    B = np.zeros((m, T))
    B[np.arange(m), c.index] = 1.0
    D = np.zeros((T - 2, T))
    for k in range(T - 2):
        D[k, k:k + 3] = (1.0, -2.0, 1.0)
    Qr = np.exp(theta[c.hyper_slot]) * D.T @ D + model.rw2_diagonal * np.eye(T)
    return B, Qr


def dense_joint_precision(model, theta):
    B, Qr = dense_rw2_pieces(model, theta)
    tau = np.exp(model.predictor_noise_log_precision)
    m = B.shape[0]
    return np.block([[tau * np.eye(m), -tau * B], [-tau * B.T, Qr + tau * B.T @ B]])


def dense_log_evidence(model, theta, dps=40):
    """``log p(y | theta)`` for the Gaussian rw2 model, marginalised in closed form.

    Evaluated in extended precision, including the assembly of ``tau D^T D +
    delta I``: the block is nearly singular, so rounding it to float64 alone
    already moves its determinant in the fifth digit.
    """
    import mpmath

    c = model.components[0]
    B, _ = dense_rw2_pieces(model, theta)
    T = c.size
    D = np.zeros((T - 2, T))
    for k in range(T - 2):
        D[k, k:k + 3] = (1.0, -2.0, 1.0)
    obs = ~np.isnan(model.y)
    with mpmath.workdps(dps):
        delta = mpmath.mpf(model.rw2_diagonal)
        Qr = mpmath.exp(theta[c.hyper_slot]) * mpmath.matrix(D.T @ D) + delta * mpmath.eye(T)
        s = 1 / mpmath.exp(model.predictor_noise_log_precision) + 1 / mpmath.exp(theta[0])
        Bo = mpmath.matrix(B[obs])
        cov = Bo * mpmath.inverse(Qr) * Bo.T + s * mpmath.eye(int(obs.sum()))
        y = mpmath.matrix(model.y[obs])
        quad = (y.T * mpmath.lu_solve(cov, y))[0]
        val = -(quad + mpmath.log(mpmath.det(cov)) + y.rows * mpmath.log(2 * mpmath.pi)) / 2
        return float(val)


def dense_conditional(model, theta):
    """Mean and covariance of ``x | theta, y`` for the Gaussian rw2 model."""
    Q = dense_joint_precision(model, theta)
    m = model.n_obs
    obs = ~np.isnan(model.y)
    c = np.zeros(Q.shape[0])
    c[:m][obs] = np.exp(theta[0])
    b = np.zeros(Q.shape[0])
    b[:m][obs] = np.exp(theta[0]) * model.y[obs]
    P = Q + np.diag(c)
    cov = np.linalg.inv(P)
    return np.linalg.solve(P, b), cov


def poisson_toy(n_obs=6, seed=3, with_iid=False):
    """Intercept-plus-slope Poisson regression; optionally a 1-element iid effect."""
    rng = np.random.default_rng(seed)
    x = np.linspace(-1, 1, n_obs)
    y = rng.poisson(np.exp(0.7 + 0.5 * x)).astype(float)
    comps = [LatentComponent.intercept(prior_precision=0.1), LatentComponent.fixed("x", x, prior_precision=0.1)]
    hyper = ()
    if with_iid:
        comps.append(LatentComponent.iid("u", np.zeros(n_obs, dtype=int), 0))
        hyper = (HyperSlot("Precision for u", HyperPrior.pc_precision(1.0, 0.01), 1.0),)
    return LatentGaussianModel(tuple(comps), poisson(), y, hyper)


@pytest.fixture(scope="session")
def salm_fit():
    from inlacore.fit import FitOptions, fit_model
    from inlacore.io import build_model, load_spec, read_csv

    spec = load_spec(SALM_SPEC)
    model = build_model(spec, read_csv(SALM_CSV))
    return fit_model(model, FitOptions(strategy="grid"))


class ConjugateToy:
    """Gaussian regression with known noise, conditioned on its mean level ``mu``.

    ``y = mu + b t + e`` with ``e ~ N(0, 1/tau)``, ``b ~ N(0, 1/prior_b)`` and
    ``mu ~ N(0, prior_sd^2)``.  Given ``mu`` the model is a latent Gaussian
    model with no hyperparameters, so ``pi(mu | y)`` is available in closed
    form and so is the marginal of ``b``.
    """

    def __init__(self, n=8, tau=4.0, prior_b=1.0, prior_sd=2.0, seed=0):
        rng = np.random.default_rng(seed)
        self.n, self.tau, self.prior_b, self.prior_sd = n, tau, prior_b, prior_sd
        self.t = np.linspace(-1, 1, n)
        self.y = 0.8 + 0.5 * self.t + rng.standard_normal(n) / np.sqrt(tau)
        self.b_index = n

    def build(self, z):
        from inlacore.likelihood import gaussian

        comps = (LatentComponent.fixed("b", self.t, prior_precision=self.prior_b),)
        return LatentGaussianModel(comps, gaussian(self.tau), self.y, (), offset=np.full(self.n, float(z[0])))

    def log_prior(self, z):
        from scipy.stats import norm

        return float(norm.logpdf(z[0], 0.0, self.prior_sd))

    def conditioned(self, options=None):
        from inlacore.fit import FitOptions
        from inlacore.mcmc import ConditionedModel

        return ConditionedModel(self.build, self.log_prior, 1, options or FitOptions())

    def direct_model(self):
        from inlacore.likelihood import gaussian

        comps = (LatentComponent.intercept(prior_precision=1.0 / self.prior_sd ** 2),
                 LatentComponent.fixed("b", self.t, prior_precision=self.prior_b))
        return LatentGaussianModel(comps, gaussian(self.tau), self.y, ())

    def _cov(self):
        # the engine's predictor carries a tiny extra noise of variance exp(-15)
        return np.eye(self.n) * (1.0 / self.tau + np.exp(-15.0)) + np.outer(self.t, self.t) / self.prior_b

    def log_evidence(self, mu):
        from scipy.stats import multivariate_normal

        return float(multivariate_normal(np.full(self.n, mu), self._cov()).logpdf(self.y))

    def posterior(self):
        """Mean and sd of ``mu | y``."""
        one = np.ones(self.n)
        S = np.linalg.inv(self._cov())
        prec = 1.0 / self.prior_sd ** 2 + one @ S @ one
        return float(one @ S @ self.y / prec), float(1.0 / np.sqrt(prec))

    def b_posterior(self):
        """Mean and sd of ``b | y`` with ``mu`` integrated out."""
        X = np.column_stack([np.ones(self.n), self.t])
        P = np.diag([1.0 / self.prior_sd ** 2, self.prior_b]) + self.tau * X.T @ X
        C = np.linalg.inv(P)
        m = C @ (self.tau * X.T @ self.y)
        return float(m[1]), float(np.sqrt(C[1, 1]))


@pytest.fixture(scope="session")
def conjugate_toy():
    return ConjugateToy()


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
