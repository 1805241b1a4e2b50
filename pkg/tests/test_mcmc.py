import numpy as np
import pytest
from scipy import stats

from inlacore import marginal_utils as mu
from inlacore.errors import ValidationError
from inlacore.fit import run_inla
from inlacore.marginal import Marginal
from inlacore.mcmc import (
    ChainState,
    ConditionedModel,
    GaussianRandomWalk,
    bma_marginal,
    conditional_state,
    grid_conditioning,
    log_acceptance_ratio,
    mh_step,
    run_chain,
)


def sup_norm(a: Marginal, b: Marginal):
    xs = np.linspace(max(a.xs[0], b.xs[0]), min(a.xs[-1], b.xs[-1]), 400)
    return float(np.max(np.abs(mu.density_at(a, xs) - mu.density_at(b, xs))))


def test_conditional_evidence_matches_closed_form(conjugate_toy):
    cm = conjugate_toy.conditioned()
    for z in (-1.0, 0.4, 2.0):
        st = conditional_state(cm, [z])
        assert st.log_marglik == pytest.approx(conjugate_toy.log_evidence(z), abs=1e-6)
        assert st.log_prior == pytest.approx(conjugate_toy.log_prior([z]))


def test_identical_target_is_always_accepted():
    k = GaussianRandomWalk(1.0)
    a = ChainState(np.zeros(1), -3.0, -1.0)
    b = ChainState(np.ones(1), -2.5, -1.5)
    assert log_acceptance_ratio(a, b, k) == 0.0


def test_infinite_target_is_always_rejected():
    k = GaussianRandomWalk(1.0)
    a = ChainState(np.zeros(1), -3.0, -1.0)
    b = ChainState(np.ones(1), -np.inf, -1.0)
    assert log_acceptance_ratio(a, b, k) == -np.inf


def test_acceptance_ratio_is_antisymmetric(conjugate_toy):
    cm = conjugate_toy.conditioned()
    k = GaussianRandomWalk(0.5)
    states = [conditional_state(cm, [z]) for z in (-0.5, 0.3, 1.7)]
    for a in states:
        for b in states:
            fwd, back = log_acceptance_ratio(a, b, k), log_acceptance_ratio(b, a, k)
            assert fwd == pytest.approx(-back, abs=1e-12)
            # pi(a) alpha(a -> b) = pi(b) alpha(b -> a)
            lhs = a.log_target + min(0.0, fwd)
            rhs = b.log_target + min(0.0, back)
            assert lhs == pytest.approx(rhs, abs=1e-10)


def test_prior_support_rejection():
    cm = ConditionedModel(lambda z: None, lambda z: -np.inf if z[0] > 0 else 0.0, 1)
    st = conditional_state(cm, [1.0])
    assert st.log_target == -np.inf


def test_failed_fit_is_rejected_and_counted(conjugate_toy):
    from inlacore.errors import NumericalError

    def build(z):
        if z[0] > 0.2:
            raise NumericalError("synthetic failure")
        return conjugate_toy.build(z)

    cm = ConditionedModel(build, conjugate_toy.log_prior, 1)
    rng = np.random.default_rng(0)
    state = conditional_state(cm, [0.0])
    fails = 0
    for _ in range(30):
        state, _, failed = mh_step(cm, state, GaussianRandomWalk(1.0), rng)
        fails += failed
        assert state.z_c[0] <= 0.2
    assert fails > 0


def test_zero_scale_gives_a_constant_chain(conjugate_toy):
    rec = run_chain(conjugate_toy.conditioned(), 20, GaussianRandomWalk(0.0), seed=0, z0=[0.3])
    assert rec.acceptance_rate == 1.0
    assert np.all(rec.samples == 0.3)


def test_chain_is_reproducible_and_warns_when_stuck(conjugate_toy, tmp_path):
    cm = conjugate_toy.conditioned()
    a = run_chain(cm, 60, GaussianRandomWalk(0.5), seed=4, track=[conjugate_toy.b_index])
    b = run_chain(cm, 60, GaussianRandomWalk(0.5), seed=4, track=[conjugate_toy.b_index])
    np.testing.assert_array_equal(a.samples, b.samples)
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    stuck = run_chain(cm, 40, GaussianRandomWalk(1e3), seed=4)
    assert stuck.acceptance_rate < 0.01 and stuck.warnings


def test_chain_validation(conjugate_toy):
    cm = conjugate_toy.conditioned()
    with pytest.raises(ValidationError):
        run_chain(cm, 10, GaussianRandomWalk(1.0), burn_in=10)
    with pytest.raises(ValidationError):
        run_chain(cm, 10, GaussianRandomWalk(1.0), thin=0)
    rec = run_chain(cm, 10, GaussianRandomWalk(1.0), seed=0)
    with pytest.raises(ValidationError):
        bma_marginal(rec, 3)
    with pytest.raises(ValidationError):
        ConditionedModel(conjugate_toy.build, conjugate_toy.log_prior, 0)


def test_constant_chain_bma_is_the_conditional(conjugate_toy):
    cm = conjugate_toy.conditioned()
    j = conjugate_toy.b_index
    rec = run_chain(cm, 12, GaussianRandomWalk(0.0), seed=0, track=[j], z0=[0.7])
    ref = conditional_state(cm, [0.7], [j]).marginals[j]
    assert sup_norm(bma_marginal(rec, j), ref) < 1e-6


def test_single_point_grid(conjugate_toy):
    cm = conjugate_toy.conditioned()
    j = conjugate_toy.b_index
    g = grid_conditioning(cm, [0.7], track=[j])
    assert g.weights.tolist() == [1.0]
    ref = conditional_state(cm, [0.7], [j]).marginals[j]
    assert sup_norm(g.marginals[j], ref) < 1e-6
    with pytest.raises(ValidationError):
        grid_conditioning(ConditionedModel(conjugate_toy.build, lambda z: -np.inf, 1), [0.0, 1.0])


def test_grid_posterior_matches_closed_form(conjugate_toy):
    m, s = conjugate_toy.posterior()
    grid = np.linspace(m - 6 * s, m + 6 * s, 241)
    g = grid_conditioning(conjugate_toy.conditioned(), grid, track=[conjugate_toy.b_index])
    exact = stats.norm.pdf(grid, m, s)
    assert np.max(np.abs(g.density - exact)) < 1e-3
    bm, bs = conjugate_toy.b_posterior()
    bma = g.marginals[conjugate_toy.b_index]
    assert mu.expect(bma, lambda x: x) == pytest.approx(bm, abs=1e-3)


def test_grid_bma_matches_direct_fit(conjugate_toy):
    m, s = conjugate_toy.posterior()
    grid = np.linspace(m - 6 * s, m + 6 * s, 121)
    g = grid_conditioning(conjugate_toy.conditioned(), grid, track=[conjugate_toy.b_index])
    direct = run_inla(conjugate_toy.direct_model(), indices=[conjugate_toy.n + 1]).marginals[conjugate_toy.n + 1]
    assert sup_norm(g.marginals[conjugate_toy.b_index], direct) < 0.01


def test_chain_on_visited_points_reproduces_bma(conjugate_toy):
    """Weighting the visited points by chain frequency is the BMA marginal."""
    from inlacore.latent_marginals import mix_marginals

    cm = conjugate_toy.conditioned()
    j = conjugate_toy.b_index
    rec = run_chain(cm, 150, GaussianRandomWalk(0.6), seed=2, track=[j])
    z, counts = np.unique(rec.samples[:, 0], return_counts=True)
    parts = [(conditional_state(cm, [zk], [j]).marginals[j], c) for zk, c in zip(z, counts)]
    assert sup_norm(mix_marginals(parts), bma_marginal(rec, j)) < 1e-6
