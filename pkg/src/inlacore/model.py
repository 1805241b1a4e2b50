"""Latent Gaussian model assembly.

The latent field is ``x = (eta, rest)`` where ``rest`` stacks the component
vectors (intercept, fixed effects, iid and rw2 effects) and ``eta`` is the
linear predictor.  ``eta`` enters the field through a tiny-noise
augmentation: ``eta = B rest + e`` with ``e ~ N(0, 1/tau_eps I)``, which gives
the joint precision::

    [[ tau_eps I,       -tau_eps B              ],
     [ -tau_eps B^T,    Q_rest + tau_eps B^T B  ]]

Forming that matrix and eliminating the ``eta`` block numerically subtracts
two numbers of size ``tau_eps`` (about 3e6) to recover ``Q_rest``.  The
factorizations below therefore build the Schur complement over ``eta`` in
closed form and hand it to :func:`inlacore.gmrf.cholesky_schur`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from . import gmrf
from .errors import ValidationError
from .gmrf import CholeskyFactor, SparseSymmetric
from .likelihood import LikelihoodFamily

__all__ = [
    "HyperPrior",
    "HyperSlot",
    "LatentComponent",
    "LatentGaussianModel",
    "assemble_joint_precision",
    "log_prior_hyper",
    "log_prior_latent",
    "MAX_HYPER",
]

MAX_HYPER = 15
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class HyperPrior:
    """Prior of one hyperparameter, always expressed on the log-precision scale.

    kinds
        ``"pc.prec"`` with ``params=(u, alpha)``: exponential prior on the
        standard deviation with ``P(sigma > u) = alpha``.
        ``"loggamma"`` with ``params=(a, b)``: Gamma(a, rate b) on the precision.
        ``"fixed"`` with ``params=(value,)``: precision held at ``value``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind == "pc.prec":
            u, alpha = self.params
            if not (u > 0 and 0 < alpha < 1):
                raise ValidationError("pc.prec prior needs u > 0 and 0 < alpha < 1")
        elif self.kind == "loggamma":
            a, b = self.params
            if not (a > 0 and b > 0):
                raise ValidationError("loggamma prior needs a > 0 and b > 0")
        elif self.kind == "fixed":
            (value,) = self.params
            if not value > 0:
                raise ValidationError("fixed precision must be positive")
        else:
            raise ValidationError(f"unknown hyperprior {self.kind!r}")

    @classmethod
    def pc_precision(cls, u: float = 1.0, alpha: float = 0.01) -> "HyperPrior":
        return cls("pc.prec", (float(u), float(alpha)))

    @classmethod
    def log_gamma(cls, a: float = 1.0, b: float = 5e-5) -> "HyperPrior":
        return cls("loggamma", (float(a), float(b)))

    @classmethod
    def fixed(cls, value: float) -> "HyperPrior":
        return cls("fixed", (float(value),))

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    @property
    def pc_rate(self) -> float:
        """Rate of the exponential prior on sigma, ``-log(alpha) / u``."""
        u, alpha = self.params
        return -np.log(alpha) / u

    def log_density(self, theta: float) -> float:
        """Log density at ``theta = log(precision)``, Jacobian included."""
        if self.kind == "pc.prec":
            lam = self.pc_rate
            return float(np.log(lam / 2.0) - lam * np.exp(-theta / 2.0) - theta / 2.0)
        if self.kind == "loggamma":
            a, b = self.params
            return float(a * np.log(b) - gammaln(a) + a * theta - b * np.exp(theta))
        if abs(theta - np.log(self.params[0])) > 1e-12:
            raise ValidationError(f"fixed hyperparameter evaluated at {theta}, expected {np.log(self.params[0])}")
        return 0.0

    def describe(self) -> str:
        return f"{self.kind}({', '.join(f'{p:g}' for p in self.params)})"


@dataclass(frozen=True)
class HyperSlot:
    name: str
    prior: HyperPrior
    initial: float = 4.0


@dataclass(frozen=True, eq=False)
class LatentComponent:
    """One term of the linear predictor.

    ``kind`` is one of ``"intercept"``, ``"fixed"``, ``"iid"``, ``"rw2"``.
    Intercept and fixed effects have size 1 and a Gaussian prior with fixed
    precision (``prior_precision``; ``None`` means the model default, ``0``
    an improper flat prior).  iid and rw2 effects map observation ``i`` to
    element ``index[i]`` and read their log precision from ``hyper_slot``.
    """

    name: str
    kind: str
    size: int = 1
    index: Optional[np.ndarray] = None
    covariate: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    hyper_slot: Optional[int] = None
    prior_precision: Optional[float] = None
    labels: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("intercept", "fixed", "iid", "rw2"):
            raise ValidationError(f"component {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in ("intercept", "fixed"):
            if self.size != 1:
                raise ValidationError(f"component {self.name!r}: fixed effects have size 1")
            if self.hyper_slot is not None:
                raise ValidationError(f"component {self.name!r}: fixed effects take no hyperparameter")
            if self.kind == "fixed" and self.covariate is None:
                raise ValidationError(f"component {self.name!r}: fixed effect needs a covariate")
            if self.prior_precision is not None and self.prior_precision < 0:
                raise ValidationError(f"component {self.name!r}: prior precision must be >= 0")
        else:
            if self.index is None:
                raise ValidationError(f"component {self.name!r}: {self.kind} needs a group index")
            if self.hyper_slot is None:
                raise ValidationError(f"component {self.name!r}: {self.kind} needs a hyperparameter slot")
            idx = np.asarray(self.index)
            if idx.size and (idx.min() < 0 or idx.max() >= self.size):
                raise ValidationError(f"component {self.name!r}: group index outside [0, {self.size})")
            if self.kind == "rw2" and self.size < 3:
                raise ValidationError(f"component {self.name!r}: rw2 needs at least 3 nodes")
            if self.kind == "iid" and self.size < 1:
                raise ValidationError(f"component {self.name!r}: empty iid model")

    @classmethod
    def intercept(cls, name="(Intercept)", prior_precision=None):
        return cls(name, "intercept", prior_precision=prior_precision)

    @classmethod
    def fixed(cls, name, covariate, prior_precision=None):
        return cls(name, "fixed", covariate=np.asarray(covariate, dtype=float),
                   prior_precision=prior_precision)

    @classmethod
    def iid(cls, name, index, hyper_slot, size=None, weights=None, labels=None):
        index = np.asarray(index, dtype=np.int64)
        size = int(index.max()) + 1 if size is None else int(size)
        return cls(name, "iid", size=size, index=index, hyper_slot=hyper_slot,
                   weights=None if weights is None else np.asarray(weights, dtype=float),
                   labels=labels)

    @classmethod
    def rw2(cls, name, index, hyper_slot, size=None, weights=None, labels=None):
        index = np.asarray(index, dtype=np.int64)
        size = int(index.max()) + 1 if size is None else int(size)
        return cls(name, "rw2", size=size, index=index, hyper_slot=hyper_slot,
                   weights=None if weights is None else np.asarray(weights, dtype=float),
                   labels=labels)

    @property
    def model_label(self) -> str:
        return {"iid": "IID model", "rw2": "RW2 model"}.get(self.kind, "fixed")

    def element_labels(self):
        if self.size == 1 and self.kind in ("intercept", "fixed"):
            return [self.name]
        labels = self.labels if self.labels is not None else range(1, self.size + 1)
        return [f"{self.name}[{lab}]" for lab in labels]


@dataclass(frozen=True, eq=False)
class LatentGaussianModel:
    """Components, likelihood, responses and hyperparameter slots of an LGM.

    ``y`` holds the responses with ``NaN`` marking missing observations
    (their predictor marginals are still produced).  ``offset`` is a known
    term added to ``eta`` inside the likelihood, so the latent field keeps a
    zero prior mean.
    """

    components: tuple
    likelihood: LikelihoodFamily
    y: np.ndarray
    hyper: tuple = ()
    predictor_noise_log_precision: float = 15.0
    fixed_effect_prior_precision: float = 0.001
    rw2_diagonal: float = 1e-5
    offset: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "hyper", tuple(self.hyper))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if self.offset is not None:
            off = np.asarray(self.offset, dtype=float).ravel()
            if off.size != self.y.size:
                raise ValidationError("offset length differs from the number of observations")
            object.__setattr__(self, "offset", off)
        if not self.components:
            raise ValidationError("model has no latent components")
        if len(self.hyper) > MAX_HYPER:
            raise ValidationError(f"{len(self.hyper)} hyperparameters; at most {MAX_HYPER} are supported")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ValidationError("component names must be unique")
        m = self.y.size
        used = set()
        for c in self.components:
            for arr, what in ((c.index, "index"), (c.covariate, "covariate"), (c.weights, "weights")):
                if arr is not None and np.asarray(arr).size != m:
                    raise ValidationError(f"component {c.name!r}: {what} has length {np.asarray(arr).size}, expected {m}")
            if c.covariate is not None and not np.all(np.isfinite(c.covariate)):
                raise ValidationError(f"component {c.name!r}: covariate has missing values")
            if c.hyper_slot is not None:
                if not 0 <= c.hyper_slot < len(self.hyper):
                    raise ValidationError(f"component {c.name!r} references missing hyper slot {c.hyper_slot}")
                used.add(c.hyper_slot)
        if self.likelihood.hyper_slot is not None:
            if not 0 <= self.likelihood.hyper_slot < len(self.hyper):
                raise ValidationError("likelihood references a missing hyper slot")
            used.add(self.likelihood.hyper_slot)
        self.likelihood.check_response(self.y)
        if not self.fixed_effect_prior_precision >= 0:
            raise ValidationError("fixed_effect_prior_precision must be >= 0")
        if any(c.kind == "rw2" for c in self.components) and not self.rw2_diagonal > 0:
            raise ValidationError("rw2_diagonal must be positive (the rw2 prior is otherwise improper)")

    # -- dimensions -----------------------------------------------------------

    @property
    def n_obs(self) -> int:
        return self.y.size

    @cached_property
    def component_offsets(self) -> dict:
        out = {}
        pos = 0
        for c in self.components:
            out[c.name] = pos
            pos += c.size
        return out

    @property
    def n_rest(self) -> int:
        return sum(c.size for c in self.components)

    @property
    def n_latent(self) -> int:
        return self.n_obs + self.n_rest

    @property
    def n_hyper(self) -> int:
        return len(self.hyper)

    @cached_property
    def free_slots(self) -> np.ndarray:
        return np.array([k for k, h in enumerate(self.hyper) if not h.prior.is_fixed], dtype=np.int64)

    @property
    def n_free(self) -> int:
        return self.free_slots.size

    @property
    def tau_eps(self) -> float:
        return float(np.exp(self.predictor_noise_log_precision))

    @cached_property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.y)

    @cached_property
    def eta_offset(self) -> np.ndarray:
        return np.zeros(self.n_obs) if self.offset is None else self.offset

    def latent_slice(self, name: str) -> slice:
        """Position of a component inside the full latent vector ``x``."""
        if name == "Predictor":
            return slice(0, self.n_obs)
        c = self.component(name)
        start = self.n_obs + self.component_offsets[name]
        return slice(start, start + c.size)

    def component(self, name: str) -> LatentComponent:
        for c in self.components:
            if c.name == name:
                return c
        raise ValidationError(f"no component named {name!r}")

    @cached_property
    def latent_labels(self) -> list:
        width = max(2, len(str(self.n_obs)))
        labels = [f"Predictor.{i + 1:0{width}d}" for i in range(self.n_obs)]
        for c in self.components:
            labels.extend(c.element_labels())
        return labels

    # -- hyperparameters -------------------------------------------------------

    def theta_full(self, theta_free) -> np.ndarray:
        """Insert the fixed hyperparameters into a free-slot vector."""
        theta_free = np.atleast_1d(np.asarray(theta_free, dtype=float))
        if theta_free.size != self.n_free:
            raise ValidationError(f"expected {self.n_free} free hyperparameters, got {theta_free.size}")
        theta = np.empty(self.n_hyper)
        for k, h in enumerate(self.hyper):
            if h.prior.is_fixed:
                theta[k] = np.log(h.prior.params[0])
        theta[self.free_slots] = theta_free
        return theta

    def initial_theta(self) -> np.ndarray:
        return np.array([self.hyper[k].initial for k in self.free_slots], dtype=float)

    def _check_theta(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != self.n_hyper:
            raise ValidationError(f"theta has length {theta.size}, model has {self.n_hyper} hyper slots")
        return theta

    # -- structure ---------------------------------------------------------------

    @cached_property
    def predictor_map(self) -> sp.csr_matrix:
        """The sparse ``m x p`` matrix ``B`` with ``eta = B rest``."""
        m = self.n_obs
        rows, cols, vals = [], [], []
        obs = np.arange(m)
        for c in self.components:
            off = self.component_offsets[c.name]
            w = np.ones(m) if c.weights is None else np.asarray(c.weights, dtype=float)
            if c.kind == "intercept":
                rows.append(obs)
                cols.append(np.full(m, off))
                vals.append(w)
            elif c.kind == "fixed":
                rows.append(obs)
                cols.append(np.full(m, off))
                vals.append(w * np.asarray(c.covariate, dtype=float))
            else:
                rows.append(obs)
                cols.append(off + np.asarray(c.index, dtype=np.int64))
                vals.append(w)
        B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(m, self.n_rest))
        B.sum_duplicates()
        B.eliminate_zeros()  # zero covariates must not add coupling absent from B^T B
        B.sort_indices()
        return B

    @cached_property
    def _btb_pattern(self):
        B = self.predictor_map
        pat = sp.coo_matrix(abs(B).T @ abs(B) + sp.eye(self.n_rest))
        keep = pat.row >= pat.col
        return pat.row[keep], pat.col[keep]

    def prior_precision_of(self, c: LatentComponent) -> float:
        return self.fixed_effect_prior_precision if c.prior_precision is None else float(c.prior_precision)

    @cached_property
    def proper_mask(self) -> np.ndarray:
        """Rest elements with a proper prior (flat fixed effects are excluded)."""
        mask = np.ones(self.n_rest, dtype=bool)
        for c in self.components:
            if c.kind in ("intercept", "fixed") and self.prior_precision_of(c) == 0.0:
                mask[self.component_offsets[c.name]] = False
        return mask

    def rest_precision(self, theta) -> SparseSymmetric:
        """Block-diagonal prior precision of the non-predictor part of ``x``."""
        theta = self._check_theta(theta)
        rows, cols, vals = [], [], []
        for c in self.components:
            off = self.component_offsets[c.name]
            if c.kind in ("intercept", "fixed"):
                rows.append([off])
                cols.append([off])
                vals.append([self.prior_precision_of(c)])
            elif c.kind == "iid":
                idx = off + np.arange(c.size)
                rows.append(idx)
                cols.append(idx)
                vals.append(np.full(c.size, np.exp(theta[c.hyper_slot])))
            else:
                blk = gmrf.build_rw2_precision(c.size, theta[c.hyper_slot]).add_diagonal(self.rw2_diagonal)
                r, cc, v = blk.triplets()
                rows.append(r + off)
                cols.append(cc + off)
                vals.append(v)
        return SparseSymmetric.from_triplets(
            self.n_rest, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), keep_pattern=True
        )

    def log_det_rest(self, theta, Q_rest: Optional[SparseSymmetric] = None) -> float:
        """``log |Q_rest|`` over the proper-prior elements, summed block by block.

        For an rw2 block ``tau D^T D + delta I`` the two null directions of
        ``D^T D`` are split off exactly, ``2 log delta + log |tau D D^T +
        delta I|``, because factorizing the nearly singular block directly
        loses most of the digits of its two smallest pivots.  ``Q_rest`` is
        accepted for interface symmetry and not needed.
        """
        theta = self._check_theta(theta)
        total = 0.0
        for c in self.components:
            if c.kind in ("intercept", "fixed"):
                prec = self.prior_precision_of(c)
                if prec > 0:
                    total += np.log(prec)
            elif c.kind == "iid":
                total += c.size * theta[c.hyper_slot]
            else:
                D = gmrf.second_difference_matrix(c.size)
                delta = self.rw2_diagonal
                inner = SparseSymmetric.from_sparse(np.exp(theta[c.hyper_slot]) * (D @ D.T)).add_diagonal(delta)
                total += 2.0 * np.log(delta) + gmrf.log_det(gmrf.cholesky(inner, permute=False))
        return float(total)

    def _schur_plan(self, Q_rest: SparseSymmetric):
        """Fixed CSC pattern of the Schur complement and the linear maps filling it.

        Returns ``(indptr, indices, pos_q, M)``: entry ``k`` of ``Q_rest.lower``
        lands at data position ``pos_q[k]`` and ``M @ d`` gives the
        ``B^T diag(d) B`` contributions.  Cached per ``Q_rest`` pattern.
        """
        lo = Q_rest.lower
        key = (lo.indptr.tobytes(), lo.indices.tobytes())
        plans = self.__dict__.setdefault("_schur_plans", {})
        plan = plans.get(key)
        if plan is not None:
            return plan
        n = self.n_rest
        B = self.predictor_map
        pr, pc = self._btb_pattern
        qr, qc, _ = Q_rest.triplets()
        pat = SparseSymmetric.from_triplets(n, np.concatenate([qr, pr]), np.concatenate([qc, pc]),
                                            np.zeros(qr.size + pr.size), keep_pattern=True).lower
        coo = pat.tocoo()
        lin = coo.col.astype(np.int64) * n + coo.row  # CSC order is sorted by this key
        qcoo = lo.tocoo()
        pos_q = np.searchsorted(lin, qcoo.col.astype(np.int64) * n + qcoo.row)
        rows_m, cols_m, vals_m = [], [], []
        for i in range(B.shape[0]):
            js = B.indices[B.indptr[i]:B.indptr[i + 1]]
            bs = B.data[B.indptr[i]:B.indptr[i + 1]]
            for a in range(js.size):
                for b in range(a + 1):
                    r, c = max(js[a], js[b]), min(js[a], js[b])
                    rows_m.append(np.searchsorted(lin, c * n + r))
                    cols_m.append(i)
                    vals_m.append(bs[a] * bs[b] * (1.0 if a == b or js[a] != js[b] else 2.0))
        M = sp.csr_matrix((vals_m, (rows_m, cols_m)), shape=(lin.size, B.shape[0]))
        plan = (pat.indptr, pat.indices, pos_q, M)
        plans[key] = plan
        return plan

    def posterior_schur(self, Q_rest: SparseSymmetric, curvature) -> SparseSymmetric:
        """``Q_rest + B^T diag(tau c / (tau + c)) B``, the Schur complement over ``eta``.

        The pattern of ``B^T B`` is always kept so that the symbolic
        factorization does not depend on which observations are missing.
        """
        c = np.asarray(curvature, dtype=float)
        tau = self.tau_eps
        indptr, indices, pos_q, M = self._schur_plan(Q_rest)
        data = M @ (tau * c / (tau + c))
        np.add.at(data, pos_q, Q_rest.lower.data)
        n = self.n_rest
        return SparseSymmetric(sp.csc_matrix((data, indices, indptr), shape=(n, n)))

    def factor_precision(self, theta, curvature, Q_rest: Optional[SparseSymmetric] = None) -> CholeskyFactor:
        """Cholesky factor of ``Q(theta) + diag(c)`` with ``c`` on the predictor block."""
        if Q_rest is None:
            Q_rest = self.rest_precision(theta)
        c = np.asarray(curvature, dtype=float)
        tau = self.tau_eps
        S = self.posterior_schur(Q_rest, c)
        return gmrf.cholesky_schur(tau + c, -tau * self.predictor_map, S)

    def quad_form(self, x, Q_rest: SparseSymmetric, curvature=None) -> float:
        """``x^T (Q + diag(c)) x`` evaluated without forming ``Q``."""
        x = np.asarray(x, dtype=float)
        m = self.n_obs
        eta, rest = x[:m], x[m:]
        resid = eta - self.predictor_map @ rest
        val = self.tau_eps * float(resid @ resid) + Q_rest.quad_form(rest)
        if curvature is not None:
            val += float(np.sum(np.asarray(curvature) * eta * eta))
        return val

    def loglik_sum(self, x, theta) -> float:
        from .likelihood import loglik

        obs = self.observed
        eta = np.asarray(x, dtype=float)[: self.n_obs] + self.eta_offset
        return float(np.sum(loglik(self.likelihood, self.y[obs], eta[obs], theta)))

    def reordered(self, order: Sequence[int]) -> "LatentGaussianModel":
        """Same model with the components listed in a different order."""
        comps = tuple(self.components[k] for k in order)
        return LatentGaussianModel(comps, self.likelihood, self.y, self.hyper,
                                   self.predictor_noise_log_precision, self.fixed_effect_prior_precision,
                                   self.rw2_diagonal, self.offset)


def assemble_joint_precision(m: LatentGaussianModel, theta) -> SparseSymmetric:
    """Joint prior precision of ``x = (eta, rest)`` with the predictor augmentation."""
    theta = m._check_theta(theta)
    tau = m.tau_eps
    B = m.predictor_map
    Qr = m.rest_precision(theta).to_sparse()
    nobs = m.n_obs
    top = sp.hstack([tau * sp.eye(nobs), -tau * B])
    bottom = sp.hstack([-tau * B.T, Qr + tau * (B.T @ B)])
    full = sp.vstack([top, bottom]).tocsc()
    return SparseSymmetric.from_sparse(full)


def log_prior_hyper(m: LatentGaussianModel, theta) -> float:
    """Sum of the hyperprior log densities on the log-precision scale."""
    theta = m._check_theta(theta)
    return float(sum(h.prior.log_density(theta[k]) for k, h in enumerate(m.hyper)))


def log_prior_latent(m: LatentGaussianModel, x, theta, Q_rest: Optional[SparseSymmetric] = None) -> float:
    """``log pi(x | theta)``.

    Elements with an improper flat prior contribute density one, so they are
    left out of both the determinant and the ``2 pi`` normalisation.
    """
    theta = m._check_theta(theta)
    x = np.asarray(x, dtype=float)
    if x.size != m.n_latent:
        raise ValidationError(f"latent vector has length {x.size}, expected {m.n_latent}")
    if Q_rest is None:
        Q_rest = m.rest_precision(theta)
    quad = m.quad_form(x, Q_rest)
    logdet = m.n_obs * m.predictor_noise_log_precision + m.log_det_rest(theta, Q_rest)
    n_proper = m.n_obs + int(m.proper_mask.sum())
    return -0.5 * quad + 0.5 * logdet - 0.5 * n_proper * LOG_2PI
