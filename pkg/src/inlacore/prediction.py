"""Posterior predictive distribution of a held-out observation.

The fitted-value marginal ``pi(lambda_i | y)`` is the predictor marginal
pushed through the inverse link.  The predictive distribution
``pi(y_i | y) = int pi(y_i | lambda) pi(lambda | y) dlambda`` is then
obtained either by two-stage sampling or by a panel quadrature over the
tabulated marginal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import norm, poisson as poisson_dist

from .errors import NumericalError, ValidationError
from .likelihood import LikelihoodFamily
from .marginal import Marginal
from .marginal_utils import sample, transform

__all__ = [
    "PredictiveDistribution",
    "fitted_value_marginal",
    "predictive_by_sampling",
    "predictive_by_quadrature",
    "LINKS",
    "K_MAX_DEFAULT",
    "MASS_REQUIRED",
]

K_MAX_DEFAULT = 100
MASS_REQUIRED = 0.999
K_MAX_LIMIT = 100_000

LINKS: dict = {"identity": lambda x: x, "exp": np.exp, "log": np.exp}


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    """Counts ``0..K`` with probabilities (poisson) or a density (gaussian)."""

    kind: str
    support: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    density: Optional[Marginal] = None

    @property
    def total_mass(self) -> float:
        if self.kind == "poisson":
            return float(self.probs.sum())
        return self.density.integral()

    def mean(self) -> float:
        if self.kind == "poisson":
            return float(np.sum(self.support * self.probs) / self.probs.sum())
        from .marginal_utils import expect

        return expect(self.density, lambda x: x)

    def variance(self) -> float:
        if self.kind == "poisson":
            mu = self.mean()
            return float(np.sum((self.support - mu) ** 2 * self.probs) / self.probs.sum())
        from .marginal_utils import expect

        mu = self.mean()
        return expect(self.density, lambda x: (x - mu) ** 2)

    def tv_distance(self, draws) -> float:
        """Total variation distance to the empirical pmf of integer ``draws``."""
        if self.kind != "poisson":
            raise ValidationError("total variation distance is defined here for count predictives")
        draws = np.asarray(draws, dtype=np.int64)
        top = max(int(self.support[-1]), int(draws.max(initial=0)))
        emp = np.bincount(draws, minlength=top + 1) / max(draws.size, 1)
        p = np.zeros(top + 1)
        p[: self.probs.size] = self.probs
        return 0.5 * float(np.abs(emp - p).sum())


def _link(link: Union[str, Callable]) -> Callable:
    if callable(link):
        return link
    try:
        return LINKS[str(link).lower()]
    except KeyError:
        raise ValidationError(f"unknown link {link!r}; use one of {sorted(LINKS)}") from None


def fitted_value_marginal(fit, i: int, link: Union[str, Callable] = "exp") -> Marginal:
    """Marginal of ``g^{-1}(eta_i)`` for predictor index ``i`` (zero based).

    ``fit`` is a :class:`~inlacore.fit.FitResult` or anything with a
    ``predictor_marginal(i)`` method.  ``link="exp"`` (also accepted as
    ``"log"``, the name of the link itself) gives the poisson mean scale.
    """
    eta = fit.predictor_marginal(i)
    f = _link(link)
    if f is LINKS["identity"]:
        return eta
    return transform(eta, f)


def predictive_by_sampling(marg: Marginal, fam: LikelihoodFamily, n: int, seed=None) -> np.ndarray:
    """Draw ``lambda`` from ``marg`` then ``y | lambda`` from the family."""
    if fam.has_hyper:
        raise ValidationError("predictive sampling for a likelihood with a free hyperparameter "
                              "requires joint (eta, theta) sampling, which is not supported")
    if n < 0:
        raise ValidationError("sample size must be nonnegative")
    rng = np.random.default_rng(seed)
    lam = sample(marg, int(n), seed=rng)
    if fam.kind == "poisson":
        if np.any(lam < 0):
            raise ValidationError("poisson predictive needs a nonnegative mean marginal")
        return rng.poisson(lam)
    return rng.normal(lam, 1.0 / np.sqrt(fam.tau_obs))


def _panels(marg: Marginal):
    xs, ds = marg.xs, marg.ds
    mid = 0.5 * (xs[1:] + xs[:-1])
    mass = 0.5 * (ds[1:] + ds[:-1]) * np.diff(xs)
    return mid, mass / mass.sum()


def predictive_by_quadrature(marg: Marginal, fam: LikelihoodFamily, k_max: Optional[int] = None,
                             points: int = 201) -> PredictiveDistribution:
    """Panel quadrature of the predictive.

    Poisson: ``P(y = j) = sum_panels pmf(j; lambda_mid) * panel_mass`` with
    trapezoid panel masses, for ``j = 0..k_max``.  When ``k_max`` is left at
    its default the support is doubled until it holds 0.999 of the mass; an
    explicit ``k_max`` that falls short raises :class:`NumericalError`.
    """
    if fam.has_hyper:
        raise ValidationError("predictive for a likelihood with a free hyperparameter requires joint "
                              "(eta, theta) sampling, which is not supported")
    mid, mass = _panels(marg)
    if fam.kind == "poisson":
        if np.any(mid < 0):
            raise ValidationError("poisson predictive needs a nonnegative mean marginal")
        auto = k_max is None
        k = K_MAX_DEFAULT if auto else int(k_max)
        if k < 0:
            raise ValidationError("k_max must be nonnegative")
        while True:
            support = np.arange(k + 1)
            probs = poisson_dist.pmf(support[:, None], mid[None, :]) @ mass
            total = float(probs.sum())
            if total >= MASS_REQUIRED:
                return PredictiveDistribution("poisson", support=support, probs=probs)
            if not auto or k >= K_MAX_LIMIT:
                raise NumericalError(f"predictive support 0..{k} holds only {total:.6f} of the mass; widen k_max")
            k *= 2
    sd = 1.0 / np.sqrt(fam.tau_obs)
    ys = np.linspace(marg.xs[0] - 6 * sd, marg.xs[-1] + 6 * sd, points)
    dens = norm.pdf(ys[:, None], mid[None, :], sd) @ mass
    return PredictiveDistribution("gaussian", density=Marginal(ys, dens).normalized())
