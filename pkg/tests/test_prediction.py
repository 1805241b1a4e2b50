import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from inlacore import marginal_utils as mu
from inlacore.errors import NumericalError, ValidationError
from inlacore.likelihood import gaussian, gaussian_hyper, poisson
from inlacore.marginal import Marginal
from inlacore.prediction import (
    K_MAX_DEFAULT,
    fitted_value_marginal,
    predictive_by_quadrature,
    predictive_by_sampling,
)


def point_mass(lam, half_width=1e-9, n=41):
    xs = np.linspace(lam - half_width, lam + half_width, n)
    return Marginal(xs, 1.0 - np.abs(np.linspace(-1, 1, n)) + 1e-12).normalized()


def lognormal_marginal(m, s, n=201):
    xs = np.linspace(m - 6 * s, m + 6 * s, n)
    return mu.transform(Marginal(xs, stats.norm.pdf(xs, m, s)).normalized(), np.exp)


class _Stub:
    def __init__(self, eta):
        self.eta = eta

    def predictor_marginal(self, i):
        if i != 0:
            raise ValidationError("no such predictor")
        return self.eta


def test_point_mass_sampling_gives_poisson_zero_probability():
    draws = predictive_by_sampling(point_mass(1.0), poisson(), 10_000, seed=5)
    assert np.mean(draws == 0) == pytest.approx(np.exp(-1), abs=0.01)


def test_point_mass_quadrature_is_the_poisson_pmf():
    pred = predictive_by_quadrature(point_mass(2.0), poisson())
    np.testing.assert_allclose(pred.probs, stats.poisson.pmf(pred.support, 2.0), atol=1e-8)
    assert pred.support[-1] == K_MAX_DEFAULT
    assert pred.total_mass >= 0.999


def test_sampling_is_reproducible():
    marg = lognormal_marginal(1.0, 0.3)
    a = predictive_by_sampling(marg, poisson(), 500, seed=11)
    np.testing.assert_array_equal(a, predictive_by_sampling(marg, poisson(), 500, seed=11))


def test_fitted_value_marginal_links():
    xs = np.linspace(-2, 8, 201)
    eta = Marginal(xs, stats.norm.pdf(xs, 3.0, 1.0)).normalized()
    assert fitted_value_marginal(_Stub(eta), 0, "identity") is eta
    lam = fitted_value_marginal(_Stub(eta), 0, "exp")
    for p in (0.025, 0.5, 0.975):
        assert mu.quantile_at(lam, p) == pytest.approx(np.exp(mu.quantile_at(eta, p)), rel=1e-3)
    with pytest.raises(ValidationError):
        fitted_value_marginal(_Stub(eta), 0, "probit")
    with pytest.raises(ValidationError):
        fitted_value_marginal(_Stub(eta), 3)


def test_explicit_k_max_too_small_is_an_error():
    with pytest.raises(NumericalError, match="widen"):
        predictive_by_quadrature(point_mass(20.0), poisson(), k_max=10)


def test_auto_support_widens_for_large_counts():
    pred = predictive_by_quadrature(point_mass(150.0), poisson())
    assert pred.support[-1] > K_MAX_DEFAULT and pred.total_mass >= 0.999


def test_gaussian_predictive_and_unsupported_hyper():
    xs = np.linspace(-5, 5, 101)
    marg = Marginal(xs, stats.norm.pdf(xs)).normalized()
    pred = predictive_by_quadrature(marg, gaussian(4.0))
    assert pred.variance() == pytest.approx(1.25, rel=1e-2)
    assert pred.total_mass == pytest.approx(1.0, abs=1e-9)
    for fn in (predictive_by_quadrature, lambda m, f: predictive_by_sampling(m, f, 10, 1)):
        with pytest.raises(ValidationError, match="joint"):
            fn(marg, gaussian_hyper(0))


@settings(max_examples=25, deadline=None)
@given(m=st.floats(-1.0, 3.5), s=st.floats(0.05, 0.6))
def test_total_expectation_and_overdispersion(m, s):
    marg = lognormal_marginal(m, s)
    pred = predictive_by_quadrature(marg, poisson())
    e_lam = mu.expect(marg, lambda x: x)
    v_lam = mu.expect(marg, lambda x: (x - e_lam) ** 2)
    assert pred.mean() == pytest.approx(e_lam, rel=0.01)
    assert pred.variance() > pred.mean()
    assert pred.variance() == pytest.approx(e_lam + v_lam, rel=0.02)


def test_sampling_agrees_with_quadrature():
    marg = lognormal_marginal(2.0, 0.2)
    pred = predictive_by_quadrature(marg, poisson())
    draws = predictive_by_sampling(marg, poisson(), 20_000, seed=2)
    assert pred.tv_distance(draws) < 0.03
    assert draws.mean() == pytest.approx(pred.mean(), abs=0.15)
