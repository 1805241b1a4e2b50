"""Brute-force quadrature references for small Poisson models.

The latent field is integrated on a tensor grid around its own conditional
mode (found with scipy), independently of the package code paths.
"""

import itertools

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import CubicSpline
from scipy.special import gammaln, logsumexp


def _log_joint(r, y, B, Qr, obs):
    """``log pi(y | r) + log pi(r)`` for stacked rows of ``r`` (proper prior)."""
    eta = r @ B.T
    ll = np.sum((y * eta - np.exp(eta) - gammaln(y + 1))[..., obs], axis=-1)
    sign, logdet = np.linalg.slogdet(Qr)
    lp = -0.5 * np.einsum("...i,ij,...j->...", r, Qr, r) + 0.5 * logdet - 0.5 * Qr.shape[0] * np.log(2 * np.pi)
    return ll + lp


def latent_grid(y, B, Qr, obs, half_width=9.0, points=81):
    """Tensor grid over ``r`` and the log joint on it (plus the axes)."""
    f = lambda r: -_log_joint(r[None, :], y, B, Qr, obs)[0]
    r0 = optimize.minimize(f, np.zeros(Qr.shape[0]), method="BFGS", options={"gtol": 1e-10}).x
    eta = B @ r0
    H = Qr + B[obs].T @ np.diag(np.exp(eta[obs])) @ B[obs]
    sd = np.sqrt(np.diag(np.linalg.inv(H)))
    axes = [np.linspace(c - half_width * s, c + half_width * s, points) for c, s in zip(r0, sd)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return axes, _log_joint(mesh, y, B, Qr, obs)


def _trap_log(lv, axes):
    """``log`` of the trapezoid integral of ``exp(lv)`` over the tensor grid."""
    w = np.zeros(lv.shape)
    for k, ax in enumerate(axes):
        h = ax[1] - ax[0]
        wk = np.full(ax.size, h)
        wk[[0, -1]] = h / 2
        shape = [1] * lv.ndim
        shape[k] = ax.size
        w = w + np.log(wk).reshape(shape)
    return logsumexp(lv + w)


def log_evidence(y, B, Qr, obs):
    axes, lv = latent_grid(y, B, Qr, obs)
    return _trap_log(lv, axes)


def latent_marginal(y, B, Qr, obs, j, points=81):
    """Normalised density of ``r_j`` on its grid axis."""
    axes, lv = latent_grid(y, B, Qr, obs, points=points)
    others = tuple(k for k in range(lv.ndim) if k != j)
    sub = [axes[k] for k in others]
    if others:
        moved = np.moveaxis(lv, j, 0)
        logs = np.array([_trap_log(moved[i], sub) for i in range(moved.shape[0])])
    else:
        logs = lv
    dens = np.exp(logs - logs.max())
    return axes[j], dens / np.trapezoid(dens, axes[j])


def dense_pieces(model, theta):
    """``(B, Q_rest)`` as dense arrays from the model description (no factorization)."""
    B = model.predictor_map.toarray()
    Qr = model.rest_precision(np.atleast_1d(theta)).to_dense()
    return B, Qr, model.observed


def hyper_model_reference(model, thetas, targets, xs_by_target, points=61):
    """Brute-force ``log pi(theta | y)`` (unnormalised) over ``thetas`` and the
    theta-integrated marginals of the rest elements ``targets`` on ``xs``.

    ``thetas`` must be an equally spaced grid covering the posterior.
    """
    y = model.y
    logs, conds = [], {j: [] for j in targets}
    for th in thetas:
        B, Qr, obs = dense_pieces(model, [th])
        axes, lv = latent_grid(y, B, Qr, obs, points=points)
        logs.append(_trap_log(lv, axes) + model.hyper[0].prior.log_density(th))
        for j in targets:
            others = tuple(k for k in range(lv.ndim) if k != j)
            moved = np.moveaxis(lv, j, 0)
            lj = np.array([_trap_log(moved[i], [axes[k] for k in others]) for i in range(moved.shape[0])])
            lj = lj - lj.max() - np.log(np.trapezoid(np.exp(lj - lj.max()), axes[j]))
            xq = xs_by_target[j]
            inside = (xq >= axes[j][0]) & (xq <= axes[j][-1])
            dj = np.zeros(xq.size)
            dj[inside] = np.exp(CubicSpline(axes[j], lj)(xq[inside]))
            conds[j].append(dj)
    logs = np.array(logs)
    h = thetas[1] - thetas[0]
    w = np.exp(logs - logs.max())
    w /= w.sum()
    mixed = {j: np.tensordot(w, np.array(conds[j]), axes=1) for j in targets}
    return logs, logsumexp(logs) + np.log(h), mixed
