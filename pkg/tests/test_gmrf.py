import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from inlacore import gmrf
from inlacore.errors import NotPositiveDefiniteError, ValidationError
from inlacore.gmrf import SparseSymmetric


def random_spd(n, density, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    A = A + A.T
    d = np.abs(A).sum(axis=1).A1 + 1.0 + rng.random(n)
    return (A + sp.diags(d)).toarray()


def test_from_triplets_sums_duplicates_and_mirrors():
    Q = SparseSymmetric.from_triplets(3, [0, 0, 1, 2, 0], [0, 0, 1, 2, 2], [1.0, 1.0, 3.0, 4.0, 0.5])
    expected = np.array([[2.0, 0, 0.5], [0, 3.0, 0], [0.5, 0, 4.0]])
    np.testing.assert_array_equal(Q.to_dense(), expected)


def test_rw2_precision_null_space_and_rank():
    Q = gmrf.build_rw2_precision(8, np.log(3.0)).to_dense()
    t = np.arange(8.0)
    np.testing.assert_allclose(Q @ np.ones(8), 0.0, atol=1e-12)
    np.testing.assert_allclose(Q @ t, 0.0, atol=1e-12)
    assert np.linalg.matrix_rank(Q) == 6
    # interior row of 3 * D^T D is 3 * (1, -4, 6, -4, 1)
    np.testing.assert_allclose(Q[3, 1:6], 3.0 * np.array([1, -4, 6, -4, 1]))


def test_rw2_requires_three_nodes():
    with pytest.raises(ValidationError):
        gmrf.build_rw2_precision(2, 0.0)


@pytest.mark.parametrize("permute", [True, False])
def test_cholesky_matches_dense(permute):
    A = random_spd(30, 0.1, 1)
    f = gmrf.cholesky(SparseSymmetric.from_dense(A), permute=permute)
    np.testing.assert_allclose(f.reconstruct(), A, atol=1e-10)
    assert gmrf.log_det(f) == pytest.approx(np.linalg.slogdet(A)[1], abs=1e-10)
    b = np.arange(30.0)
    np.testing.assert_allclose(gmrf.solve(f, b), np.linalg.solve(A, b), rtol=1e-10)


def test_marginal_variances_match_inverse():
    A = random_spd(25, 0.15, 2)
    f = gmrf.cholesky(SparseSymmetric.from_dense(A))
    np.testing.assert_allclose(gmrf.marginal_variances(f), np.diag(np.linalg.inv(A)), rtol=1e-10)
    np.testing.assert_allclose(gmrf.marginal_variances(f, method="dense"), np.diag(np.linalg.inv(A)), rtol=1e-10)


def test_cholesky_schur_matches_full_factor():
    rng = np.random.default_rng(4)
    m, p = 6, 4
    B = rng.standard_normal((m, p))
    tau = 1e4
    c = rng.random(m) + 0.5
    R = random_spd(p, 0.5, 5)
    S = R + B.T @ np.diag(tau * c / (tau + c)) @ B
    f = gmrf.cholesky_schur(tau + c, sp.csr_matrix(-tau * B), SparseSymmetric.from_dense(S))
    full = np.block([[np.diag(tau + c), -tau * B], [-tau * B.T, R + tau * B.T @ B]])
    assert gmrf.log_det(f) == pytest.approx(np.linalg.slogdet(full)[1], abs=1e-8)
    b = rng.standard_normal(m + p)
    np.testing.assert_allclose(gmrf.solve(f, b), np.linalg.solve(full, b), rtol=1e-6, atol=1e-9)


def test_not_positive_definite_reports_pivot():
    A = np.array([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(NotPositiveDefiniteError) as info:
        gmrf.cholesky(SparseSymmetric.from_dense(A), permute=False)
    assert info.value.index == 1


def test_minimum_degree_ordering_is_permutation():
    A = random_spd(40, 0.05, 6)
    perm = gmrf.minimum_degree_ordering(SparseSymmetric.from_dense(A))
    assert sorted(perm.tolist()) == list(range(40))


def test_triplet_file_roundtrip(tmp_path):
    A = random_spd(7, 0.3, 8)
    Q = SparseSymmetric.from_dense(A)
    Q.write_triplets(tmp_path / "q.txt")
    np.testing.assert_array_equal(SparseSymmetric.read_triplets(tmp_path / "q.txt").to_dense(), Q.to_dense())


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 25), density=st.floats(0.0, 0.4), seed=st.integers(0, 10_000))
def test_log_det_and_variances_property(n, density, seed):
    A = random_spd(n, density, seed)
    f = gmrf.cholesky(SparseSymmetric.from_dense(A))
    assert gmrf.log_det(f) == pytest.approx(np.linalg.slogdet(A)[1], abs=1e-9)
    np.testing.assert_allclose(gmrf.marginal_variances(f), np.diag(np.linalg.inv(A)), rtol=1e-9)
