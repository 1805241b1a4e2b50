import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import dense_conditional, dense_joint_precision, poisson_toy, rw2_gaussian_model
from inlacore.gaussian_approx import find_conditional_mode, log_gaussian_density
from inlacore.likelihood import dloglik_deta


@pytest.mark.parametrize("theta", [(1.0, 3.0), (2.5, 6.0), (-0.5, 1.0)])
def test_gaussian_likelihood_is_exact_in_one_step(theta):
    m = rw2_gaussian_model(12, missing=(3,))
    theta = np.array(theta)
    g = find_conditional_mode(m, theta)
    mu, cov = dense_conditional(m, theta)
    assert g.iterations == 1
    np.testing.assert_allclose(g.mode, mu, atol=1e-9)
    np.testing.assert_allclose(g.marginal_variances, np.diag(cov), atol=1e-9)
    P = dense_joint_precision(m, theta)
    P[:12, :12] += np.diag(np.where(np.isnan(m.y), 0.0, np.exp(theta[0])))
    np.testing.assert_allclose(g.precision_at_mode.to_dense(), P, rtol=1e-12, atol=1e-6)


def test_poisson_mode_is_stationary():
    m = poisson_toy(with_iid=True)
    theta = np.array([0.5])
    g = find_conditional_mode(m, theta)
    # gradient of log pi(y|x) + log pi(x|theta) vanishes at the mode
    grad_lik = np.zeros(m.n_latent)
    grad_lik[: m.n_obs] = dloglik_deta(m.likelihood, m.y, g.mode[: m.n_obs])
    from inlacore.model import assemble_joint_precision

    Q = assemble_joint_precision(m, theta).to_dense()
    r = grad_lik - Q @ g.mode
    assert np.max(np.abs(r)) < 1e-5 * np.max(np.abs(Q @ g.mode) + 1)


def test_warm_start_gives_same_mode():
    m = poisson_toy(with_iid=True)
    a = find_conditional_mode(m, np.array([0.5]))
    b = find_conditional_mode(m, np.array([0.5]), x0=a.mode + 0.3)
    np.testing.assert_allclose(a.mode, b.mode, atol=1e-7)


def test_log_gaussian_density_matches_dense():
    m = rw2_gaussian_model(8)
    theta = np.array([1.0, 2.0])
    g = find_conditional_mode(m, theta)
    mu, cov = dense_conditional(m, theta)
    P = np.linalg.inv(cov)
    x = mu + 0.01 * np.random.default_rng(1).standard_normal(mu.size)
    ref = -0.5 * (x - mu) @ g.precision_at_mode.to_dense() @ (x - mu) + 0.5 * g.log_det_precision \
        - 0.5 * mu.size * np.log(2 * np.pi)
    assert log_gaussian_density(g, x) == pytest.approx(ref, rel=1e-10)
    assert g.log_det_precision == pytest.approx(np.linalg.slogdet(g.precision_at_mode.to_dense())[1], abs=1e-6)
    assert np.isfinite(P).all()


@settings(max_examples=15, deadline=None)
@given(theta=st.floats(-3, 4), seed=st.integers(0, 1000))
def test_newton_objective_never_decreases(theta, seed):
    """The accepted Newton path ends at a point at least as good as any start."""
    m = poisson_toy(seed=seed, with_iid=True)
    from inlacore.model import log_prior_latent

    g = find_conditional_mode(m, np.array([theta]))
    f = lambda x: m.loglik_sum(x, np.array([theta])) + log_prior_latent(m, x, np.array([theta]))
    x0 = np.zeros(m.n_latent)
    assert f(g.mode) >= f(x0) - 1e-9
    rng = np.random.default_rng(seed)
    for _ in range(3):
        assert f(g.mode) >= f(g.mode + 1e-3 * rng.standard_normal(m.n_latent)) - 1e-9
