"""INLA within Metropolis-Hastings.

The parameter vector is split into ``z_c``, explored by a random-walk chain,
and the rest, handled by a conditional fit for each proposed ``z_c``.  The
chain targets ``pi(z_c | y) ∝ pi~(y | z_c) pi(z_c)`` where ``pi~(y | z_c)`` is
the marginal likelihood of the conditional model.  Latent marginals are
averaged over the kept states (Bayesian model averaging).  A deterministic
variant replaces the chain by a grid over ``z_c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import InlaError, ValidationError
from .fit import FitOptions, run_inla
from .latent_marginals import mix_marginals
from .marginal import Marginal

__all__ = [
    "ConditionedModel",
    "ChainState",
    "GaussianRandomWalk",
    "ChainRecord",
    "GridConditioning",
    "conditional_state",
    "log_acceptance_ratio",
    "mh_step",
    "run_chain",
    "bma_marginal",
    "grid_conditioning",
    "LOW_ACCEPTANCE",
]

log = logging.getLogger(__name__)

LOW_ACCEPTANCE = 0.01


@dataclass(frozen=True)
class ConditionedModel:
    """``build(z_c)`` returns the conditional model; ``prior_zc(z_c)`` its log prior."""

    build: Callable
    prior_zc: Callable
    dim_zc: int
    options: FitOptions = FitOptions()

    def __post_init__(self):
        if self.dim_zc < 1:
            raise ValidationError("conditioning dimension must be at least 1")


@dataclass(frozen=True, eq=False)
class ChainState:
    z_c: np.ndarray
    log_marglik: float
    log_prior: float
    marginals: dict = field(default_factory=dict)
    theta_mode: Optional[np.ndarray] = None

    @property
    def log_target(self) -> float:
        return self.log_marglik + self.log_prior


class GaussianRandomWalk:
    """Componentwise Gaussian random walk; symmetric, so ``log q(z|z') - log q(z'|z) = 0``."""

    def __init__(self, scale):
        self.scale = np.atleast_1d(np.asarray(scale, dtype=float))
        if np.any(self.scale < 0):
            raise ValidationError("random-walk scale must be nonnegative")

    def propose(self, z, rng) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z + self.scale * rng.standard_normal(z.shape)

    def log_q_ratio(self, z, z_new) -> float:
        return 0.0


def conditional_state(cm: ConditionedModel, z_c, track: Sequence[int] = (), init=None) -> ChainState:
    """Fit the conditional model at ``z_c``; ``-inf`` target where the prior vanishes."""
    z_c = np.atleast_1d(np.asarray(z_c, dtype=float))
    if z_c.size != cm.dim_zc:
        raise ValidationError(f"z_c has length {z_c.size}, expected {cm.dim_zc}")
    lp = float(cm.prior_zc(z_c))
    if not np.isfinite(lp):
        return ChainState(z_c, -np.inf, lp)
    model = cm.build(z_c)
    if init is not None and np.size(init) != model.n_free:
        init = None
    run = run_inla(model, cm.options, indices=list(track), init=init)
    return ChainState(z_c, float(run.log_mlik), lp, dict(run.marginals), run.theta_post.mode.copy())


def log_acceptance_ratio(current: ChainState, proposed: ChainState, kernel) -> float:
    """``log`` of the Metropolis-Hastings ratio before truncation at one."""
    if not np.isfinite(proposed.log_target):
        return -np.inf
    return proposed.log_target - current.log_target + kernel.log_q_ratio(current.z_c, proposed.z_c)


def mh_step(cm: ConditionedModel, state: ChainState, kernel, rng, track: Sequence[int] = ()):
    """One proposal; returns ``(new_state, accepted, failed)``.

    A proposal whose conditional fit raises is rejected and flagged as failed.
    """
    z_new = kernel.propose(state.z_c, rng)
    u = rng.random()
    if np.array_equal(z_new, state.z_c):
        return state, True, False
    try:
        prop = conditional_state(cm, z_new, track, init=state.theta_mode)
    except InlaError as exc:
        log.warning("conditional fit failed at z_c=%s: %s", z_new, exc)
        return state, False, True
    a = log_acceptance_ratio(state, prop, kernel)
    if np.log(u) < min(0.0, a):
        return prop, True, False
    return state, False, False


@dataclass(eq=False)
class ChainRecord:
    """Trace of a chain.

    ``trace`` holds every iteration as ``(iteration, z_c, log_target,
    accepted)``; ``samples`` and ``marginals`` the kept iterations (after
    burn-in and thinning).
    """

    trace: list
    samples: np.ndarray
    marginals: list
    acceptance_rate: float
    failures: int
    warnings: list
    tracked: tuple

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            dim = self.samples.shape[1] if self.samples.ndim == 2 else len(self.trace[0][1])
            fh.write(",".join(["iteration"] + [f"z{k + 1}" for k in range(dim)] + ["log_target", "accepted"]) + "\n")
            for it, z, lt, acc in self.trace:
                fh.write(",".join([str(it)] + [repr(float(v)) for v in z] + [repr(float(lt)), str(int(acc))]) + "\n")


def run_chain(cm: ConditionedModel, iters: int, kernel, seed=None, burn_in: Optional[int] = None, thin: int = 1,
              track: Sequence[int] = (), z0=None) -> ChainRecord:
    """Run ``iters`` Metropolis-Hastings iterations (burn-in defaults to 10%)."""
    iters = int(iters)
    burn_in = iters // 10 if burn_in is None else int(burn_in)
    if iters <= burn_in or burn_in < 0:
        raise ValidationError("need iters > burn_in >= 0")
    if thin < 1:
        raise ValidationError("thin must be at least 1")
    rng = np.random.default_rng(seed)
    track = tuple(int(j) for j in track)
    z0 = np.zeros(cm.dim_zc) if z0 is None else np.atleast_1d(np.asarray(z0, dtype=float))
    state = conditional_state(cm, z0, track)
    if not np.isfinite(state.log_target):
        raise ValidationError("initial z_c has zero posterior density")
    trace, samples, margs = [], [], []
    accepted_after = 0
    failures = 0
    for it in range(1, iters + 1):
        state, acc, failed = mh_step(cm, state, kernel, rng, track)
        failures += int(failed)
        trace.append((it, state.z_c.copy(), state.log_target, acc))
        if it > burn_in:
            accepted_after += int(acc)
            if (it - burn_in) % thin == 0:
                samples.append(state.z_c.copy())
                margs.append(state.marginals)
    rate = accepted_after / (iters - burn_in)
    warnings = []
    if rate < LOW_ACCEPTANCE:
        msg = f"acceptance rate {rate:.3%} after burn-in; the kernel scale is probably wrong"
        log.warning(msg)
        warnings.append(msg)
    if failures:
        warnings.append(f"{failures} proposals rejected because the conditional fit failed")
    return ChainRecord(trace, np.array(samples), margs, rate, failures, warnings, track)


def _mix_by_identity(marginals: list, weights) -> Marginal:
    """Mixture that groups repeated (identical) marginals before interpolating."""
    acc: dict = {}
    objs: dict = {}
    for m, w in zip(marginals, weights):
        acc[id(m)] = acc.get(id(m), 0.0) + float(w)
        objs[id(m)] = m
    return mix_marginals([(objs[k], acc[k]) for k in acc])


def bma_marginal(record: ChainRecord, j: int) -> Marginal:
    """Equal-weight average over kept iterations of the conditional marginal of element ``j``."""
    if j not in record.tracked:
        raise ValidationError(f"element {j} was not tracked by the chain")
    if not record.marginals:
        raise ValidationError("chain kept no iterations")
    return _mix_by_identity([m[j] for m in record.marginals], np.ones(len(record.marginals)))


@dataclass(eq=False)
class GridConditioning:
    grid: np.ndarray
    log_target: np.ndarray
    weights: np.ndarray
    density: Optional[np.ndarray]
    states: list
    marginals: dict


def grid_conditioning(cm: ConditionedModel, grid, track: Sequence[int] = ()) -> GridConditioning:
    """Fit the conditional model at every grid point and average.

    For a one-dimensional increasing grid the posterior of ``z_c`` is
    normalised with the trapezoid rule and the averaging weights are the
    trapezoid panel weights; otherwise each point gets weight proportional
    to its posterior value.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None] if cm.dim_zc == 1 else grid[None, :]
    if grid.shape[0] < 1 or grid.shape[1] != cm.dim_zc:
        raise ValidationError("grid must be a nonempty list of z_c points")
    states = []
    init = None
    for z in grid:
        st = conditional_state(cm, z, track, init=init)
        states.append(st)
        if st.theta_mode is not None:
            init = st.theta_mode
    lt = np.array([s.log_target for s in states])
    if not np.any(np.isfinite(lt)):
        raise ValidationError("posterior is zero at every grid point")
    p = np.where(np.isfinite(lt), np.exp(lt - np.max(lt[np.isfinite(lt)])), 0.0)
    density = None
    if cm.dim_zc == 1 and grid.shape[0] > 1 and np.all(np.diff(grid[:, 0]) > 0):
        x = grid[:, 0]
        density = p / np.trapezoid(p, x)
        h = np.diff(x)
        panel = np.zeros_like(x)
        panel[:-1] += h / 2
        panel[1:] += h / 2
        w = density * panel
    else:
        w = p
    w = w / w.sum()
    margs = {}
    for j in track:
        parts = [(s.marginals[j], wk) for s, wk in zip(states, w) if wk > 0]
        margs[j] = mix_marginals(parts)
    return GridConditioning(grid, lt, w, density, states, margs)
