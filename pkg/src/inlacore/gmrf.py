"""Sparse symmetric precision matrices and their Cholesky factorization.

The factorization is a plain left-looking sparse Cholesky on a fill-reducing
ordering.  The symbolic analysis (ordering, elimination tree and column
structures) only depends on the sparsity pattern, which in a latent Gaussian
model does not change with the hyperparameters, so it is cached per pattern.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NotPositiveDefiniteError, ValidationError

__all__ = [
    "SparseSymmetric",
    "CholeskyFactor",
    "build_iid_precision",
    "build_rw2_precision",
    "second_difference_matrix",
    "minimum_degree_ordering",
    "cholesky",
    "cholesky_schur",
    "log_det",
    "solve",
    "marginal_variances",
    "PD_THRESHOLD",
    "BAND_IDENTITY_LIMIT",
]

# pivot <= PD_THRESHOLD * max(diag(Q)) is rejected
PD_THRESHOLD = 1e-12
# matrices with bandwidth <= this are factorized in natural order
BAND_IDENTITY_LIMIT = 5


@dataclass(frozen=True)
class SparseSymmetric:
    """Symmetric matrix stored as its lower triangle in CSC layout.

    Every diagonal entry is stored, even when zero.  Off-diagonal explicit
    zeros are removed unless the matrix was built with ``keep_pattern=True``
    (used internally when a structural pattern must survive numerical
    cancellation).
    """

    lower: sp.csc_matrix

    def __post_init__(self):
        lo = self.lower
        if lo.shape[0] != lo.shape[1]:
            raise ValidationError(f"precision must be square, got shape {lo.shape}")

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def nnz(self) -> int:
        return self.lower.nnz

    @classmethod
    def from_triplets(cls, n, rows, cols, vals, keep_pattern=False) -> "SparseSymmetric":
        """Assemble from (row, col, value) triplets; duplicates are summed.

        Entries in the upper triangle are mirrored into the lower triangle, so
        a triplet list may contain either half (but not both, or the entry is
        counted twice).
        """
        n = int(n)
        if n < 1:
            raise ValidationError("precision dimension must be at least 1")
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
            raise ValidationError(f"triplet index outside [0, {n})")
        r = np.maximum(rows, cols)
        c = np.minimum(rows, cols)
        diag = np.arange(n)
        r = np.concatenate([r, diag])
        c = np.concatenate([c, diag])
        v = np.concatenate([vals, np.zeros(n)])
        coo = sp.coo_matrix((v, (r, c)), shape=(n, n))
        coo.sum_duplicates()
        if not keep_pattern:
            keep = (coo.data != 0.0) | (coo.row == coo.col)
            coo = sp.coo_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=(n, n))
        lower = coo.tocsc()
        lower.sort_indices()
        return cls(lower)

    @classmethod
    def from_sparse(cls, mat, keep_pattern=False) -> "SparseSymmetric":
        """Take the lower triangle of a full symmetric sparse (or dense) matrix."""
        coo = sp.coo_matrix(mat)
        keep = coo.row >= coo.col
        return cls.from_triplets(coo.shape[0], coo.row[keep], coo.col[keep], coo.data[keep],
                                 keep_pattern=keep_pattern)

    @classmethod
    def from_dense(cls, a) -> "SparseSymmetric":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError("dense precision must be a square matrix")
        return cls.from_sparse(np.tril(a))

    def get(self, i, j) -> float:
        if i < j:
            i, j = j, i
        return float(self.lower[i, j])

    def diagonal(self) -> np.ndarray:
        return self.lower.diagonal()

    def to_sparse(self) -> sp.csc_matrix:
        """Full symmetric matrix as a CSC sparse matrix."""
        lo = self.lower
        strict = sp.tril(lo, k=-1, format="csc")
        return (lo + strict.T).tocsc()

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo = self.lower
        return lo @ x + lo.T @ x - self.diagonal() * x

    def quad_form(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.matvec(x))

    def bandwidth(self) -> int:
        coo = self.lower.tocoo()
        if coo.nnz == 0:
            return 0
        return int(np.max(coo.row - coo.col))

    def add_diagonal(self, d) -> "SparseSymmetric":
        d = np.broadcast_to(np.asarray(d, dtype=float), (self.n,))
        return SparseSymmetric((self.lower + sp.diags(d, format="csc")).tocsc())

    def scaled(self, factor: float) -> "SparseSymmetric":
        return SparseSymmetric((self.lower * float(factor)).tocsc())

    def triplets(self):
        """Lower-triangle triplets ``(rows, cols, values)`` in column-major order."""
        coo = self.lower.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return coo.row[order], coo.col[order], coo.data[order]

    def write_triplets(self, path) -> None:
        """Write ``i j value`` lines (1-based, lower triangle) for oracle checks."""
        rows, cols, vals = self.triplets()
        with open(path, "w") as fh:
            fh.write(f"% {self.n} {self.n} {len(vals)}\n")
            for i, j, v in zip(rows, cols, vals):
                fh.write(f"{i + 1} {j + 1} {float(v)!r}\n")

    @classmethod
    def read_triplets(cls, path) -> "SparseSymmetric":
        rows, cols, vals = [], [], []
        n = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("%"):
                    n = int(line[1:].split()[0])
                    continue
                i, j, v = line.split()
                rows.append(int(i) - 1)
                cols.append(int(j) - 1)
                vals.append(float(v))
        if n is None:
            n = max(max(rows), max(cols)) + 1
        return cls.from_triplets(n, rows, cols, vals)


def build_iid_precision(n: int, log_tau: float) -> SparseSymmetric:
    """``exp(log_tau) * I_n``."""
    if n < 1:
        raise ValidationError("iid model needs at least one element (empty model)")
    idx = np.arange(n)
    return SparseSymmetric.from_triplets(n, idx, idx, np.full(n, np.exp(log_tau)))


def second_difference_matrix(T: int) -> sp.csr_matrix:
    """The (T-2) x T matrix D with rows (1, -2, 1)."""
    if T < 3:
        raise ValidationError(f"second-order random walk needs T >= 3, got {T}")
    return sp.diags([np.ones(T - 2), -2.0 * np.ones(T - 2), np.ones(T - 2)], [0, 1, 2],
                    shape=(T - 2, T), format="csr")


def build_rw2_precision(T: int, log_tau: float) -> SparseSymmetric:
    """``tau * D^T D`` for the second-order random walk on ``T`` equally spaced nodes.

    The result has rank ``T - 2``; constants and linear trends span its null
    space.
    """
    D = second_difference_matrix(T)
    return SparseSymmetric.from_sparse(np.exp(log_tau) * (D.T @ D))


# ----------------------------------------------------------------------------
# ordering and symbolic analysis
# ----------------------------------------------------------------------------


def minimum_degree_ordering(Q: SparseSymmetric) -> np.ndarray:
    """Greedy minimum-degree elimination ordering.

    Ties are broken by the smallest index so the ordering is deterministic.
    Returns ``perm`` such that the permuted matrix is ``Q[perm][:, perm]``.
    """
    n = Q.n
    coo = Q.lower.tocoo()
    adj = [set() for _ in range(n)]
    for i, j in zip(coo.row, coo.col):
        if i != j:
            adj[i].add(int(j))
            adj[j].add(int(i))
    eliminated = np.zeros(n, dtype=bool)
    perm = np.empty(n, dtype=np.int64)
    degree = np.array([len(a) for a in adj])
    for step in range(n):
        deg = np.where(eliminated, np.iinfo(np.int64).max, degree)
        v = int(np.argmin(deg))
        perm[step] = v
        eliminated[v] = True
        nbrs = adj[v]
        for u in nbrs:
            adj[u].discard(v)
            adj[u] |= nbrs - {u}
            degree[u] = len(adj[u])
        adj[v] = set()
    return perm


@dataclass(frozen=True)
class _Symbolic:
    structs: list  # structs[j]: sorted rows > j of column j of L
    rowpat: list  # rowpat[j]: list of (k, position of j in structs[k])


def _symbolic(A: sp.csc_matrix) -> _Symbolic:
    n = A.shape[0]
    children = [[] for _ in range(n)]
    structs = []
    for j in range(n):
        rows = A.indices[A.indptr[j]:A.indptr[j + 1]]
        s = set(int(r) for r in rows if r > j)
        for c in children[j]:
            s.update(r for r in structs[c] if r > j)
        arr = np.array(sorted(s), dtype=np.int64)
        structs.append(arr)
        if arr.size:
            children[int(arr[0])].append(j)
    rowpat = [[] for _ in range(n)]
    for k in range(n):
        for pos, r in enumerate(structs[k]):
            rowpat[int(r)].append((k, pos))
    return _Symbolic(structs, rowpat)


_CACHE_LIMIT = 64
_symbolic_cache: "OrderedDict[tuple, tuple]" = OrderedDict()
_cache_lock = threading.Lock()


@dataclass(frozen=True)
class _Layout:
    """Lower triangle of ``P Q P^T`` in CSC form as a gather from ``Q.lower.data``."""

    indptr: np.ndarray
    indices: np.ndarray
    take: np.ndarray


def _layout(Q: SparseSymmetric, perm: np.ndarray) -> _Layout:
    n = Q.n
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    coo = Q.lower.tocoo()
    r = inv[coo.row]
    c = inv[coo.col]
    rr = np.maximum(r, c)
    cc = np.minimum(r, c)
    order = np.lexsort((rr, cc))
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(cc, minlength=n), out=indptr[1:])
    return _Layout(indptr, rr[order], order)


def _analyse(Q: SparseSymmetric, permute: bool):
    lo = Q.lower
    key = (lo.shape[0], bool(permute), lo.indptr.tobytes(), lo.indices.tobytes())
    with _cache_lock:
        hit = _symbolic_cache.get(key)
        if hit is not None:
            _symbolic_cache.move_to_end(key)
            return hit
    if permute and Q.bandwidth() > BAND_IDENTITY_LIMIT:
        perm = minimum_degree_ordering(Q)
    else:
        perm = np.arange(Q.n, dtype=np.int64)
    lay = _layout(Q, perm)
    A = sp.csc_matrix((np.ones(lay.indices.size), lay.indices, lay.indptr), shape=(Q.n, Q.n))
    sym = _symbolic(A)
    entry = (perm, sym, lay)
    with _cache_lock:
        _symbolic_cache[key] = entry
        if len(_symbolic_cache) > _CACHE_LIMIT:
            _symbolic_cache.popitem(last=False)
    return entry


# ----------------------------------------------------------------------------
# numeric factorization
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor with ``P Q P^T = L L^T``.

    ``perm[a]`` is the original index placed at position ``a``.  The factor is
    held column by column: ``diag[j]`` and the below-diagonal values ``vals[j]``
    at rows ``structs[j]`` (positions in the permuted ordering).
    """

    perm: np.ndarray
    diag: np.ndarray
    structs: list = field(repr=False)
    vals: list = field(repr=False)

    @property
    def n(self) -> int:
        return self.diag.size

    @property
    def L(self) -> sp.csc_matrix:
        n = self.n
        indptr = [0]
        indices = []
        data = []
        for j in range(n):
            indices.append(np.array([j]))
            indices.append(self.structs[j])
            data.append(np.array([self.diag[j]]))
            data.append(self.vals[j])
            indptr.append(indptr[-1] + 1 + self.structs[j].size)
        return sp.csc_matrix((np.concatenate(data), np.concatenate(indices), np.array(indptr)),
                             shape=(n, n))

    def reconstruct(self) -> np.ndarray:
        """Dense ``Q`` rebuilt from the factor (test helper)."""
        L = self.L.toarray()
        A = L @ L.T
        n = self.n
        Q = np.empty_like(A)
        Q[np.ix_(self.perm, self.perm)] = A
        return Q


def cholesky(Q: SparseSymmetric, permute: bool = True) -> CholeskyFactor:
    """Sparse Cholesky factorization of a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefiniteError
        If a pivot is at or below ``PD_THRESHOLD * max(diag(Q))``; the error
        carries the failing index in the original ordering.
    """
    perm, sym, lay = _analyse(Q, permute)
    n = Q.n
    dmax = float(np.max(Q.diagonal())) if n else 0.0
    thresh = PD_THRESHOLD * max(dmax, 0.0)
    structs = sym.structs
    w = np.zeros(n)
    diag = np.empty(n)
    vals = [None] * n
    indptr, indices, data = lay.indptr, lay.indices, Q.lower.data[lay.take]
    for j in range(n):
        lo, hi = indptr[j], indptr[j + 1]
        w[indices[lo:hi]] = data[lo:hi]
        for k, pos in sym.rowpat[j]:
            sk = structs[k]
            vk = vals[k]
            w[sk[pos:]] -= vk[pos] * vk[pos:]
        d = w[j]
        if not d > thresh or not np.isfinite(d):
            raise NotPositiveDefiniteError(int(perm[j]), d)
        ljj = np.sqrt(d)
        s = structs[j]
        vals[j] = w[s] / ljj
        diag[j] = ljj
        w[s] = 0.0
        w[j] = 0.0
    return CholeskyFactor(perm=perm, diag=diag, structs=structs, vals=vals)


def cholesky_schur(lead_diag, coupling, schur: SparseSymmetric, permute: bool = True) -> CholeskyFactor:
    """Factor ``[[D, E], [E^T, F]]`` with diagonal ``D`` from a precomputed Schur complement.

    ``schur`` must equal ``F - E^T D^{-1} E``.  Callers that know a
    cancellation-free expression for the Schur complement use this to avoid
    forming ``F`` and subtracting a nearly equal quantity, which is what a
    generic elimination of ``D`` would do.

    Parameters
    ----------
    lead_diag : (m,) array
        Diagonal of the leading block, all positive.
    coupling : (m, p) sparse matrix
        Off-diagonal block ``E``.
    schur : SparseSymmetric
        ``p x p`` Schur complement.
    """
    d = np.asarray(lead_diag, dtype=float)
    m = d.size
    if np.any(~(d > 0)):
        bad = int(np.flatnonzero(~(d > 0))[0])
        raise NotPositiveDefiniteError(bad, float(d[bad]))
    E = sp.csr_matrix(coupling)
    if E.shape != (m, schur.n):
        raise ValidationError("coupling block has the wrong shape")
    fs = cholesky(schur, permute=permute)
    inv_s = np.empty(schur.n, dtype=np.int64)
    inv_s[fs.perm] = np.arange(schur.n)
    sd = np.sqrt(d)
    structs = []
    vals = []
    for j in range(m):
        lo, hi = E.indptr[j], E.indptr[j + 1]
        cols = inv_s[E.indices[lo:hi]] + m
        v = E.data[lo:hi] / sd[j]
        order = np.argsort(cols, kind="stable")
        structs.append(cols[order])
        vals.append(v[order])
    structs.extend(s + m for s in fs.structs)
    vals.extend(fs.vals)
    perm = np.concatenate([np.arange(m, dtype=np.int64), fs.perm + m])
    return CholeskyFactor(perm=perm, diag=np.concatenate([sd, fs.diag]), structs=structs, vals=vals)


def log_det(f: CholeskyFactor) -> float:
    """``log |Q| = 2 * sum(log L_ii)``."""
    return float(2.0 * np.sum(np.log(f.diag)))


def solve(f: CholeskyFactor, b) -> np.ndarray:
    """Solve ``Q x = b`` for a vector or an ``(n, k)`` block of right-hand sides."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != f.n:
        raise ValidationError(f"right-hand side has length {b.shape[0]}, expected {f.n}")
    c = b[f.perm].copy()
    diag, structs, vals = f.diag, f.structs, f.vals
    if c.ndim == 1:
        for j in range(f.n):
            c[j] /= diag[j]
            s = structs[j]
            if s.size:
                c[s] -= vals[j] * c[j]
        for j in range(f.n - 1, -1, -1):
            s = structs[j]
            if s.size:
                c[j] -= vals[j] @ c[s]
            c[j] /= diag[j]
    else:
        for j in range(f.n):
            c[j] /= diag[j]
            s = structs[j]
            if s.size:
                c[s] -= np.outer(vals[j], c[j])
        for j in range(f.n - 1, -1, -1):
            s = structs[j]
            if s.size:
                c[j] -= vals[j] @ c[s]
            c[j] /= diag[j]
    x = np.empty_like(c)
    x[f.perm] = c
    return x


def _takahashi(f: CholeskyFactor):
    """Entries of ``(P Q P^T)^{-1}`` on the pattern of ``L`` (permuted ordering)."""
    n = f.n
    sig_diag = np.empty(n)
    sig_cols = [None] * n  # dict row -> value, rows in structs[j]
    for i in range(n - 1, -1, -1):
        s = f.structs[i]
        lii = f.diag[i]
        if s.size == 0:
            sig_cols[i] = {}
            sig_diag[i] = 1.0 / lii ** 2
            continue
        v = f.vals[i] / lii
        k = s.size
        block = np.empty((k, k))
        for a in range(k):
            ra = int(s[a])
            block[a, a] = sig_diag[ra]
            col = sig_cols[ra]
            for b in range(a + 1, k):
                val = col[int(s[b])]
                block[a, b] = val
                block[b, a] = val
        off = -(block @ v)
        sig_cols[i] = dict(zip(s.tolist(), off.tolist()))
        sig_diag[i] = 1.0 / lii ** 2 - float(v @ off)
    return sig_diag, sig_cols


def marginal_variances(f: CholeskyFactor, method: str = "takahashi") -> np.ndarray:
    """Diagonal of ``Q^{-1}`` in the original ordering.

    ``method="takahashi"`` runs the partial-inverse recursions on the pattern
    of the factor; ``method="dense"`` inverts densely and is limited to
    ``n <= 2000``.
    """
    n = f.n
    if method == "dense":
        if n > 2000:
            raise ValidationError("dense marginal variances are limited to n <= 2000")
        Linv = np.linalg.inv(f.L.toarray())
        d = np.sum(Linv ** 2, axis=0)
    elif method == "takahashi":
        d, _ = _takahashi(f)
    else:
        raise ValidationError(f"unknown marginal-variance method {method!r}")
    out = np.empty(n)
    out[f.perm] = d
    return out
