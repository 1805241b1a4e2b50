"""Figures written to files (PNG by default) with the non-interactive backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .marginal_utils import density_at  # noqa: E402

__all__ = ["plot_marginal", "plot_conditionals", "plot_fit", "plot_predictive", "plot_chain"]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_marginal(m, path, title="", xlabel="x"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(m.xs, m.ds, color="black")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    return _save(fig, path)


def plot_conditionals(parts, weights, mixture, path, title=""):
    """Per-support-point conditionals (unweighted and weighted) beside their mixture."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
    for m in parts:
        a1.plot(m.xs, m.ds, lw=1)
    a1.set_title("conditional marginals")
    for m, w in zip(parts, weights):
        a2.plot(mixture.xs, w * np.asarray(density_at(m, mixture.xs)), lw=1, ls="--")
    a2.plot(mixture.xs, mixture.ds, color="black", lw=2, label="mixture")
    a2.set_title("weighted, with mixture")
    a2.legend(loc="best")
    fig.suptitle(title)
    return _save(fig, path)


def plot_fit(result, out_dir):
    """One figure per fixed effect and hyperparameter; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    k = 0
    for sec in ("fixed", "hyper"):
        for lab, m in result.marginals.get(sec, {}).items():
            k += 1
            paths.append(plot_marginal(m, os.path.join(out_dir, f"{sec}_{k:02d}.png"), title=lab, xlabel=lab))
    return paths


def plot_predictive(pred, path, draws=None, title="posterior predictive"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if pred.kind == "poisson":
        if draws is not None and len(draws):
            bins = np.arange(int(np.max(draws)) + 2) - 0.5
            ax.hist(draws, bins=bins, density=True, color="0.8", label="sampling")
        ax.plot(pred.support, pred.probs, color="black", label="quadrature")
        ax.set_xlim(0, max(1, int(pred.support[np.cumsum(pred.probs) <= 0.9999][-1:].max(initial=1)) + 1))
    else:
        if draws is not None and len(draws):
            ax.hist(draws, bins=50, density=True, color="0.8", label="sampling")
        ax.plot(pred.density.xs, pred.density.ds, color="black", label="quadrature")
    ax.legend(loc="best")
    ax.set_title(title)
    return _save(fig, path)


def plot_chain(record, path):
    it = [t[0] for t in record.trace]
    z = np.array([t[1] for t in record.trace])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for k in range(z.shape[1]):
        ax.plot(it, z[:, k], lw=0.6, label=f"z{k + 1}")
    ax.set_xlabel("iteration")
    ax.legend(loc="best")
    ax.set_title(f"acceptance {record.acceptance_rate:.2f}")
    return _save(fig, path)
