"""Operations on tabulated marginals: evaluation, CDF, quantiles, sampling,
HPD intervals, expectations, modes and change of variables.

Densities are interpolated by a cubic spline of the log density, which is
exact for Gaussian tabulations.  Integrals use a four-times refined grid on
which the interpolated density is treated as piecewise linear.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import MultimodalMarginalError, ValidationError
from .marginal import Marginal

__all__ = [
    "density_at",
    "cdf_at",
    "quantile_at",
    "sample",
    "hpd_interval",
    "expect",
    "mode_of",
    "transform",
    "smooth",
    "summarize",
    "SUMMARY_QUANTILES",
]

REFINE = 4
SUMMARY_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def density_at(m: Marginal, x):
    """Interpolated density; zero outside ``[xs[0], xs[-1]]``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    inside = (x >= m.xs[0]) & (x <= m.xs[-1])
    if np.any(inside):
        sp = m.log_spline
        if sp is None:
            out[inside] = np.interp(x[inside], m.xs, m.ds)
        else:
            out[inside] = np.exp(sp(x[inside]))
    return out if out.ndim else float(out)


def _refined(m: Marginal):
    xs = m.xs
    t = np.arange(REFINE) / REFINE
    fine = (xs[:-1, None] + np.diff(xs)[:, None] * t[None, :]).ravel()
    fine = np.append(fine, xs[-1])
    return fine, density_at(m, fine)


def _cumulative(m: Marginal):
    xf, df = _refined(m)
    cells = 0.5 * (df[1:] + df[:-1]) * np.diff(xf)
    C = np.concatenate([[0.0], np.cumsum(cells)])
    return xf, df, C


def _cell_mass(xf, df, k, t):
    """Mass from ``xf[k]`` to ``xf[k] + t`` with linear density in the cell."""
    h = xf[k + 1] - xf[k]
    slope = (df[k + 1] - df[k]) / h
    return df[k] * t + 0.5 * slope * t * t


def cdf_at(m: Marginal, q):
    q = np.asarray(q, dtype=float)
    xf, df, C = _cumulative(m)
    total = C[-1]
    qc = np.clip(q, xf[0], xf[-1])
    k = np.clip(np.searchsorted(xf, qc, side="right") - 1, 0, xf.size - 2)
    val = (C[k] + _cell_mass(xf, df, k, qc - xf[k])) / total
    val = np.clip(val, 0.0, 1.0)
    return val if val.ndim else float(val)


def _quantiles(m: Marginal, p):
    xf, df, C = _cumulative(m)
    target = np.asarray(p, dtype=float) * C[-1]
    k = np.clip(np.searchsorted(C, target, side="right") - 1, 0, xf.size - 2)
    lo = np.zeros(target.shape)
    hi = xf[k + 1] - xf[k]
    need = target - C[k]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = _cell_mass(xf, df, k, mid) < need
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return xf[k] + 0.5 * (lo + hi)


def quantile_at(m: Marginal, p):
    """Inverse CDF for ``p`` in the open interval (0, 1)."""
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValidationError("quantile probabilities must lie strictly between 0 and 1")
    out = _quantiles(m, p)
    return out if out.ndim else float(out)


def sample(m: Marginal, n: int, seed=None) -> np.ndarray:
    """``n`` independent draws by inverse-CDF sampling."""
    if n < 0:
        raise ValidationError("sample size must be nonnegative")
    u = np.random.default_rng(seed).random(int(n))
    return _quantiles(m, u)


def hpd_interval(m: Marginal, p: float):
    """Shortest interval ``[lo, hi]`` holding probability ``p``.

    Found by bisection on the density level.  Raises
    :class:`MultimodalMarginalError` when the region above the level is not
    a single interval.
    """
    if not 0 < p <= 1:
        raise ValidationError("HPD probability must lie in (0, 1]")
    if p == 1:
        return float(m.xs[0]), float(m.xs[-1])
    xs = m.xs
    t = np.arange(16) / 16
    xf = np.append((xs[:-1, None] + np.diff(xs)[:, None] * t[None, :]).ravel(), xs[-1])
    df = density_at(m, xf)
    cells = 0.5 * (df[1:] + df[:-1]) * np.diff(xf)
    total = cells.sum()
    mid = 0.5 * (df[1:] + df[:-1])
    lo_h, hi_h = 0.0, float(df.max())
    for _ in range(80):
        h = 0.5 * (lo_h + hi_h)
        if cells[mid >= h].sum() >= p * total:
            lo_h = h
        else:
            hi_h = h
    inside = mid >= lo_h
    idx = np.flatnonzero(inside)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    segments = []
    start = 0
    for b in list(breaks) + [idx.size - 1]:
        segments.append((float(xf[idx[start]]), float(xf[idx[b] + 1])))
        start = b + 1
    if len(segments) > 1:
        raise MultimodalMarginalError(segments)
    return segments[0]


def expect(m: Marginal, fun: Callable):
    """``E[fun(X)]``; ``fun`` maps an array of x values to an array (or a tuple of arrays)."""
    xf, df = _refined(m)
    norm = np.trapezoid(df, xf)
    vals = fun(xf)
    if isinstance(vals, (tuple, list)):
        return np.array([np.trapezoid(np.broadcast_to(v, xf.shape) * df, xf) / norm for v in vals])
    vals = np.asarray(vals, dtype=float)
    if vals.shape == xf.shape:
        return float(np.trapezoid(vals * df, xf) / norm)
    if vals.ndim == 2 and vals.shape[-1] == xf.size:
        return np.trapezoid(vals * df[None, :], xf, axis=-1) / norm
    raise ValidationError("expectation function must return values aligned with its input")


def mode_of(m: Marginal) -> float:
    """Location of the maximum: grid argmax (smallest x on ties) refined by golden section."""
    k = int(np.argmax(m.ds))
    n = m.xs.size
    if (k > 0 and m.ds[k - 1] == m.ds[k]) or (k < n - 1 and m.ds[k + 1] == m.ds[k]):
        return float(m.xs[k])
    a = m.xs[max(k - 1, 0)]
    b = m.xs[min(k + 1, n - 1)]
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = density_at(m, c), density_at(m, d)
    for _ in range(100):
        if b - a < 1e-12 * max(1.0, abs(a)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = density_at(m, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = density_at(m, d)
    return float(0.5 * (a + b))


def transform(m: Marginal, fun: Callable) -> Marginal:
    """Density of ``fun(X)`` for a strictly monotone ``fun``.

    The grid is mapped pointwise and the density multiplied by ``|dx/dy|``,
    taken by second-order finite differences on the mapped grid.
    """
    ys = np.asarray(fun(m.xs), dtype=float)
    if ys.shape != m.xs.shape or not np.all(np.isfinite(ys)):
        raise ValidationError("transformation must map the grid to finite values")
    dy = np.diff(ys)
    if np.all(dy > 0):
        xs, ds = m.xs, m.ds
    elif np.all(dy < 0):
        ys, xs, ds = ys[::-1], m.xs[::-1], m.ds[::-1]
    else:
        raise ValidationError("transformation is not strictly monotone on the grid")
    jac = np.abs(np.gradient(xs, ys))
    return Marginal(ys, ds * jac).normalized()


def smooth(m: Marginal, out_points: int) -> Marginal:
    """Resample on ``out_points`` equally spaced points by log-spline interpolation."""
    if out_points < 9:
        raise ValidationError("a marginal needs at least 9 points")
    xs = np.linspace(m.xs[0], m.xs[-1], int(out_points))
    return Marginal(xs, density_at(m, xs)).normalized()


def summarize(m: Marginal) -> dict:
    """Mean, standard deviation, the summary quantiles and the mode."""
    mean = expect(m, lambda x: x)
    second = expect(m, lambda x: (x - mean) ** 2)
    q = quantile_at(m, np.array(SUMMARY_QUANTILES))
    return {
        "mean": float(mean),
        "sd": float(np.sqrt(max(second, 0.0))),
        "quantiles": {f"{p}quant": float(v) for p, v in zip(SUMMARY_QUANTILES, q)},
        "mode": mode_of(m),
    }
