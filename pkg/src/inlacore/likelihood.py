"""Univariate observation models with analytic derivatives in the linear predictor.

All functions are vectorised over ``y`` and ``eta``.  Missing responses are
the caller's business: pass only observed entries (or mask the result).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaln

from .errors import ValidationError

__all__ = [
    "LikelihoodFamily",
    "gaussian",
    "gaussian_hyper",
    "poisson",
    "family_from_name",
    "loglik",
    "dloglik_deta",
    "d2loglik_deta2",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LikelihoodFamily:
    """Observation model for ``y_i | eta_i``.

    ``kind`` is ``"gaussian"`` or ``"poisson"`` (log link).  A gaussian
    family has either a known precision ``tau_obs`` or reads its log precision
    from hyperparameter slot ``hyper_slot``.
    """

    kind: str
    tau_obs: Optional[float] = None
    hyper_slot: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValidationError(f"unsupported likelihood family {self.kind!r}")
        if self.kind == "gaussian":
            if (self.tau_obs is None) == (self.hyper_slot is None):
                raise ValidationError("gaussian family needs exactly one of tau_obs or hyper_slot")
            if self.tau_obs is not None and not self.tau_obs > 0:
                raise ValidationError("gaussian observation precision must be positive")
        elif self.tau_obs is not None or self.hyper_slot is not None:
            raise ValidationError("poisson family takes no precision")

    @property
    def has_hyper(self) -> bool:
        return self.hyper_slot is not None

    def precision(self, theta) -> float:
        if self.hyper_slot is not None:
            return float(np.exp(theta[self.hyper_slot]))
        return float(self.tau_obs)

    def check_response(self, y) -> None:
        y = np.asarray(y, dtype=float)
        obs = y[~np.isnan(y)]
        if self.kind == "poisson":
            if np.any(obs < 0) or np.any(obs != np.round(obs)):
                raise ValidationError("poisson responses must be nonnegative integers")
            if np.any(obs > 1e6):
                raise ValidationError("poisson responses above 1e6 are not supported")
        elif not np.all(np.isfinite(obs)):
            raise ValidationError("gaussian responses must be finite")


def gaussian(tau_obs: float = 1.0) -> LikelihoodFamily:
    return LikelihoodFamily("gaussian", tau_obs=float(tau_obs))


def gaussian_hyper(slot: int) -> LikelihoodFamily:
    return LikelihoodFamily("gaussian", hyper_slot=int(slot))


def poisson() -> LikelihoodFamily:
    return LikelihoodFamily("poisson")


def family_from_name(name: str, tau_obs=None, hyper_slot=None) -> LikelihoodFamily:
    """Case-insensitive lookup (``"Poisson"``, ``"gaussian"``, ...)."""
    key = str(name).strip().lower()
    if key == "poisson":
        return poisson()
    if key in ("gaussian", "normal"):
        if hyper_slot is not None:
            return gaussian_hyper(hyper_slot)
        return gaussian(1.0 if tau_obs is None else tau_obs)
    raise ValidationError(f"unknown likelihood family {name!r}")


def _check_poisson_y(y):
    if np.any(y < 0):
        raise ValidationError("negative count in poisson likelihood")


def loglik(fam: LikelihoodFamily, y, eta, theta=()) -> np.ndarray:
    """Log density ``log pi(y | eta, theta)`` including normalising constants."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.kind == "poisson":
        _check_poisson_y(y)
        # a trial Newton step can overshoot; -inf there makes step halving reject it
        with np.errstate(over="ignore"):
            return y * eta - np.exp(eta) - gammaln(y + 1.0)
    tau = fam.precision(theta)
    return 0.5 * (np.log(tau) - LOG_2PI) - 0.5 * tau * (y - eta) ** 2


def dloglik_deta(fam: LikelihoodFamily, y, eta, theta=()) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.kind == "poisson":
        _check_poisson_y(y)
        return y - np.exp(eta)
    return fam.precision(theta) * (y - eta)


def d2loglik_deta2(fam: LikelihoodFamily, y, eta, theta=()) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.kind == "poisson":
        _check_poisson_y(y)
        return -np.exp(eta) + 0.0 * y
    return np.full(np.broadcast(y, eta).shape, -fam.precision(theta))
