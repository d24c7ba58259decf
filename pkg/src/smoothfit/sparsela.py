"""Sparse linear-algebra layer: orderings, factorizations, trace kernels.

Matrices are scipy CSC arrays; the numeric loops live in
:mod:`smoothfit.kernels`.  The Cholesky route pivots for sparsity only, so
the permutation is computed once per sparsity pattern in a pre-processing
step and cached across refactorizations with new values (the pattern of a
penalized normal matrix does not change with the regularization weights).
The QR route works on the stacked, penalty-augmented system and detects
dependent columns from small diagonal entries of R (Heath, 1982).
"""

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import splu

from . import kernels
from .errors import IndefiniteError, SingularityError, SpecError

#: Heath drop threshold: |R_jj| below this fraction of the largest diagonal
HEATH_DROP_RTOL = 1e-7

#: condition estimate beyond which the Cholesky path recommends a QR refit
CONDITION_WARN = 1.0 / (1e3 * np.finfo(float).eps)


def as_csc(A):
    A = sp.csc_array(A)
    A.sort_indices()
    return A


def check_symmetric(A, tol=1e-12):
    d = abs(A - A.T)
    mx = d.max() if d.nnz else 0.0
    scale = max(abs(A).max() if A.nnz else 0.0, 1.0)
    if mx > tol * scale:
        raise SpecError("matrix is not symmetric")


def fill_reducing_permutation(A):
    """Minimum-degree ordering of a symmetric sparsity pattern.

    Greedy elimination on the adjacency graph with deterministic index
    tie-breaking; dense rows drift to the end of the ordering, which is
    what keeps multi-level penalized normal matrices thin to factor.
    """
    A = as_csc(A)
    n = A.shape[0]
    indptr, indices = A.indptr, A.indices
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in indices[indptr[j]:indptr[j + 1]]:
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    alive = set(range(n))
    order = np.empty(n, dtype=np.int64)
    degs = np.array([len(a) for a in adj], dtype=np.int64)
    for t in range(n):
        v = min(alive, key=lambda u: (degs[u], u))
        order[t] = v
        alive.discard(v)
        nb = adj[v]
        for u in nb:
            au = adj[u]
            au.discard(v)
            au |= nb
            au.discard(u)
            degs[u] = len(au)
        adj[v] = set()
    return order


class SymbolicChol:
    """Reusable symbolic factorization of a fixed sparsity pattern."""

    def __init__(self, pattern, perm):
        pattern = as_csc(pattern)
        n = pattern.shape[0]
        self.n = n
        self.perm = np.asarray(perm, dtype=np.int64)
        tagged = pattern.copy()
        tagged.data = np.arange(tagged.nnz, dtype=float)
        permuted = as_csc(tagged[self.perm][:, self.perm])
        self.value_map = permuted.data.astype(np.int64)
        self.Pp = permuted.indptr.astype(np.int64)
        self.Pi = permuted.indices.astype(np.int64)
        # row/col of each permuted entry, for diagonal preconditioning
        self.entry_row = self.Pi
        self.entry_col = np.repeat(np.arange(n, dtype=np.int64),
                                   np.diff(self.Pp))
        self.parent = kernels.etree(n, self.Pp, self.Pi)
        self.Lp = kernels.chol_symbolic(n, self.Pp, self.Pi, self.parent)

    def factor(self, values, dscale=None):
        """Numeric factorization of the pattern filled with ``values``.

        ``values`` aligns with the canonical CSC data of the analyzed
        pattern.  ``dscale`` applies the diagonal preconditioner
        D A D before factorizing; solves transparently undo it.
        """
        n = self.n
        Ax = values[self.value_map]
        if dscale is not None:
            dp = dscale[self.perm]
            Ax = Ax * dp[self.entry_row] * dp[self.entry_col]
        Li = np.zeros(self.Lp[n], dtype=np.int64)
        Lx = np.zeros(self.Lp[n])
        fail = kernels.chol_numeric(n, self.Pp, self.Pi, Ax, self.parent,
                                    self.Lp, Li, Lx)
        if fail >= 0:
            raise IndefiniteError(self.perm[fail])
        return CholeskyFactor(self, Li, Lx, dscale=dscale)


class CholeskyFactor:
    """Sparsity-pivoted Cholesky of a symmetric positive definite matrix.

    With preconditioner D (identity by default) the represented identity is
    ``D A D = P^T L L^T P``, i.e. ``A^{-1} = D P^T L^{-T} L^{-1} P D``.
    """

    def __init__(self, symbolic, Li, Lx, dscale=None):
        self.symbolic = symbolic
        self.n = symbolic.n
        self.perm = symbolic.perm
        self.Lp = symbolic.Lp
        self.Li = Li
        self.Lx = Lx
        self.dscale = dscale
        diag = Lx[self.Lp[:-1]]
        self.logdet = 2.0 * float(np.sum(np.log(diag)))
        if dscale is not None:
            self.logdet -= 2.0 * float(np.sum(np.log(dscale)))

    @property
    def L(self):
        n = self.n
        return sp.csc_array((self.Lx, self.Li, self.Lp), shape=(n, n))

    def nnz_L(self):
        return int(self.Lp[self.n])

    def _pre(self, b):
        x = b if self.dscale is None else b * self.dscale
        return x[self.perm]

    def _post(self, y):
        out = np.empty_like(y)
        out[self.perm] = y
        if self.dscale is not None:
            out = out * self.dscale
        return out

    def solve(self, b):
        """x with A x = b."""
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            y = self._pre(b).copy()
            kernels.lower_solve(self.n, self.Lp, self.Li, self.Lx, y)
            kernels.lower_tsolve(self.n, self.Lp, self.Li, self.Lx, y)
            return self._post(y)
        Y = self._pre(b).copy()
        kernels.lower_solve_many(self.n, self.Lp, self.Li, self.Lx, Y)
        kernels.lower_tsolve_many(self.n, self.Lp, self.Li, self.Lx, Y)
        return self._post(Y)

    def half_solve(self, B):
        """L^{-1} P D B for a dense block B; rows arrive permuted."""
        Y = self._pre(np.asarray(B, dtype=float)).copy()
        if Y.ndim == 1:
            kernels.lower_solve(self.n, self.Lp, self.Li, self.Lx, Y)
        else:
            kernels.lower_solve_many(self.n, self.Lp, self.Li, self.Lx, Y)
        return Y

    def half_tsolve_scatter(self, Y):
        """D P^T L^{-T} Y: adjoint of :meth:`half_solve`."""
        Y = np.array(Y, dtype=float)
        if Y.ndim == 1:
            kernels.lower_tsolve(self.n, self.Lp, self.Li, self.Lx, Y)
        else:
            kernels.lower_tsolve_many(self.n, self.Lp, self.Li, self.Lx, Y)
        return self._post(Y)

    def matvec(self, x):
        """A x reconstructed from the factor."""
        v = self._pre(np.asarray(x, dtype=float)).copy()
        L = self.L
        v = L @ (L.T @ v)
        return self._post_inv_scale(v)

    def _post_inv_scale(self, y):
        out = np.empty_like(y)
        out[self.perm] = y
        if self.dscale is not None:
            out = out / self.dscale
        return out

    def _pre_unscaled(self, b):
        x = b if self.dscale is None else b / self.dscale
        return x[self.perm]

    def matvec_original(self, x):
        # A = D^{-1} P^T L L^T P D^{-1}
        v = self._pre_unscaled(np.asarray(x, dtype=float))
        L = self.L
        v = L @ (L.T @ v)
        out = np.empty_like(v)
        out[self.perm] = v
        if self.dscale is not None:
            out = out / self.dscale
        return out


def pivoted_cholesky(A, perm=None, dscale=None):
    """Factor a symmetric matrix with a fill-reducing permutation.

    Raises :class:`IndefiniteError` carrying the failing (original) pivot
    index when the matrix is not positive definite.
    """
    A = as_csc(A)
    check_symmetric(A, tol=1e-10)
    if perm is None:
        perm = fill_reducing_permutation(A)
    symbolic = SymbolicChol(A, perm)
    return symbolic.factor(A.data, dscale=dscale)


def trace_inv_form(factor, D_r):
    """tr(A^{-1} S^r) where S^r = D_r D_r^T, via squared forward solves.

    Only the nonzero columns of ``D_r`` are solved; for an embedded penalty
    root that is its rank, not the matrix dimension.
    """
    B = _dense_cols(D_r)
    if B.shape[1] == 0:
        return 0.0
    if not isinstance(factor, CholeskyFactor):
        Y = factor.half_solve(B)
        return float(np.sum(Y * Y))
    if factor.dscale is not None:
        B = B * factor.dscale[:, None]
    B = B[factor.perm, :]
    return float(kernels.sq_fwd_solve_cols(factor.n, factor.Lp, factor.Li,
                                           factor.Lx, np.ascontiguousarray(B)))


def trace_inv_pair(factor, D_j, D_l):
    """tr(A^{-1} S^j A^{-1} S^l) = ||(L^{-1}P D_j)^T (L^{-1}P D_l)||_F^2."""
    Bj = factor.half_solve(_dense_cols(D_j))
    Bl = factor.half_solve(_dense_cols(D_l))
    M = Bj.T @ Bl
    return float(np.sum(M * M))


def _dense_cols(D):
    if sp.issparse(D):
        D = as_csc(D)
        nz = np.flatnonzero(np.diff(D.indptr))
        return np.asarray(D[:, nz].todense())
    D = np.asarray(D, dtype=float)
    nz = np.flatnonzero(np.any(D != 0.0, axis=0))
    return D[:, nz]


def invert_lower(L):
    """Sparse inverse of a lower-triangular matrix, column by column."""
    L = as_csc(L)
    n = L.shape[0]
    Lp = L.indptr.astype(np.int64)
    Li = L.indices.astype(np.int64)
    Lx = L.data.astype(float)
    diag = L.diagonal()
    if np.any(diag == 0.0):
        raise SingularityError("zero diagonal entry in triangular matrix")
    # the kernel expects the diagonal entry first within each column
    for j in range(n):
        lo, hi = Lp[j], Lp[j + 1]
        if hi > lo and Li[lo] != j:
            k = lo + int(np.nonzero(Li[lo:hi] == j)[0][0])
            Li[lo], Li[k] = Li[k], Li[lo]
            Lx[lo], Lx[k] = Lx[k], Lx[lo]
    Ip, Ii, Ix = kernels.invert_lower_csc(n, Lp, Li, Lx)
    return sp.csc_array((Ix, Ii, Ip), shape=(n, n))


class QRFactor:
    """R factor of the column-permuted stacked system [X; E_lambda^T].

    ``R^T R`` reproduces the penalized normal matrix on retained columns.
    Columns whose diagonal entry of R falls below ``drop_tol`` times the
    largest diagonal are reported in ``dropped`` (original indices) and
    excluded from solves; their trailing row mass is rotated back into R so
    the retained block stays consistent.
    """

    def __init__(self, R, perm, dropped_perm, drop_tol):
        self.n = R.shape[0]
        self.perm = np.asarray(perm, dtype=np.int64)
        self._R = R
        self.drop_tol = drop_tol
        self.dropped = {int(self.perm[j]) for j in dropped_perm}
        self._keep = np.array(
            [j for j in range(self.n) if j not in set(dropped_perm)],
            dtype=np.int64)
        diag = R[self._keep, self._keep]
        self.logdet = 2.0 * float(np.sum(np.log(diag)))
        self.dscale = None

    @property
    def R(self):
        return sp.csc_array(np.triu(self._R))

    def solve(self, b):
        """x with (R^T R) x = b on retained columns; dropped entries are 0."""
        b = np.asarray(b, dtype=float)
        one = b.ndim == 1
        B = b.reshape(-1, 1) if one else b
        Bp = B[self.perm, :]
        K = self._keep
        Rk = self._R[np.ix_(K, K)]
        Y = solve_triangular(Rk, Bp[K, :], trans="T", lower=False)
        Y = solve_triangular(Rk, Y, lower=False)
        out = np.zeros_like(Bp)
        out[K, :] = Y
        res = np.empty_like(out)
        res[self.perm, :] = out
        return res[:, 0] if one else res

    def half_solve(self, B):
        """R^{-T} applied to permuted, retained rows of B (for traces)."""
        B = np.asarray(B, dtype=float)
        one = B.ndim == 1
        if one:
            B = B.reshape(-1, 1)
        Bp = B[self.perm, :]
        K = self._keep
        Rk = self._R[np.ix_(K, K)]
        Y = np.zeros((self.n, B.shape[1]))
        Y[K, :] = solve_triangular(Rk, Bp[K, :], trans="T", lower=False)
        return Y[:, 0] if one else Y

    def half_tsolve_scatter(self, Y):
        Y = np.asarray(Y, dtype=float)
        one = Y.ndim == 1
        if one:
            Y = Y.reshape(-1, 1)
        K = self._keep
        Rk = self._R[np.ix_(K, K)]
        out = np.zeros_like(Y)
        out[K, :] = solve_triangular(Rk, Y[K, :], lower=False)
        res = np.empty_like(out)
        res[self.perm, :] = out
        return res[:, 0] if one else res

    def nnz_L(self):
        return int(np.count_nonzero(np.triu(self._R)))


def penalized_qr(X, E_lambda, perm=None, drop_tol=HEATH_DROP_RTOL):
    """QR of the stacked [X; E_lambda^T] with dependent-column detection.

    ``E_lambda`` must satisfy E E^T = S_lambda.  Column order follows the
    fill-reducing permutation of the normal-matrix pattern so the factor
    matches the Cholesky route's.
    """
    X = sp.csr_array(X)
    n_p = X.shape[1]
    if E_lambda is None:
        stacked = X
    else:
        Et = sp.csr_array(sp.csc_array(E_lambda).T)
        if Et.shape[1] != n_p:
            raise SpecError("penalty root has incompatible dimension")
        stacked = sp.vstack([X, Et], format="csr")
    if perm is None:
        G = stacked.T @ stacked
        perm = fill_reducing_permutation(G)
    iperm = np.empty(n_p, dtype=np.int64)
    iperm[perm] = np.arange(n_p)
    cols = iperm[stacked.indices]
    R = np.zeros((n_p, n_p))
    kernels.qr_insert_rows(R, stacked.indptr.astype(np.int64),
                           cols.astype(np.int64),
                           stacked.data.astype(float), stacked.shape[0])
    scale = float(np.max(np.abs(np.diag(R)))) if n_p else 0.0
    if scale == 0.0:
        raise SpecError("all columns flagged unidentifiable")
    dropped = []
    changed = True
    while changed:
        changed = False
        diag = np.abs(np.diag(R))
        for j in range(n_p):
            if j in dropped:
                continue
            if diag[j] < drop_tol * scale:
                tail = R[j, j + 1:].copy()
                R[j, j:] = 0.0
                dropped.append(j)
                nzc = np.flatnonzero(tail)
                if nzc.size:
                    rp = np.array([0, nzc.size], dtype=np.int64)
                    kernels.qr_insert_rows(R, rp,
                                           (nzc + j + 1).astype(np.int64),
                                           tail[nzc], 1)
                changed = True
                break
    if len(dropped) == n_p:
        raise SpecError("all columns flagged unidentifiable")
    return QRFactor(R, perm, dropped, drop_tol)


def condition_estimate(factor, iters=15, seed=0):
    """Rough 2-norm condition number of the factored matrix.

    Power iteration for the largest singular value and inverse iteration
    through the factor for the smallest (Cline-style cheap estimate: right
    order of magnitude, not digits).
    """
    n = factor.n
    rng = np.random.default_rng(seed)
    if isinstance(factor, CholeskyFactor):
        L = factor.L
        perm = factor.perm

        def amul(x):
            v = x if factor.dscale is None else x / factor.dscale
            v = v[perm]
            v = L @ (L.T @ v)
            out = np.empty_like(v)
            out[perm] = v
            if factor.dscale is not None:
                out = out / factor.dscale
            return out
    else:
        K = factor._keep
        Rk = factor._R[np.ix_(K, K)]
        perm = factor.perm

        def amul(x):
            xp = x[perm]
            v = np.zeros_like(xp)
            v[K] = Rk.T @ (Rk @ xp[K])
            out = np.empty_like(v)
            out[perm] = v
            return out

    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    smax = 1.0
    for _ in range(iters):
        y = amul(x)
        smax = np.linalg.norm(y)
        if smax == 0.0:
            return np.inf
        x = y / smax
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    smin = smax
    for _ in range(iters):
        y = factor.solve(x)
        ny = np.linalg.norm(y)
        if not np.isfinite(ny) or ny == 0.0:
            return np.inf
        smin = 1.0 / ny
        x = y / ny
    return float(smax / smin)


class LURankFactor:
    """Threshold-pivoted sparse LU used for cheap rank interrogation.

    ``U`` carries the kernel information of a symmetric matrix; the
    smallest-singular-pair estimate drives Foster-style elimination of
    dependent columns.  ``flagged`` is True when the factorization could
    not be completed (structural singularity) and the caller must fall
    back to the dense pivoted-QR route.
    """

    def __init__(self, A):
        A = as_csc(A)
        self.n = A.shape[0]
        self.flagged = False
        self._lu = None
        try:
            self._lu = splu(sp.csc_matrix(A), diag_pivot_thresh=0.5,
                            options=dict(SymmetricMode=True))
            if np.any(self._lu.U.diagonal() == 0.0):
                self.flagged = True
        except RuntimeError:
            self.flagged = True

    @property
    def U(self):
        return None if self._lu is None else sp.csc_array(self._lu.U)

    def smallest_singular_pair(self, iters=20, seed=0):
        """(sigma_min estimate, v) by inverse iteration through the factor."""
        if self.flagged:
            return 0.0, None
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.n)
        x /= np.linalg.norm(x)
        sigma = np.inf
        for _ in range(iters):
            y = self._lu.solve(x)
            ny = np.linalg.norm(y)
            if not np.isfinite(ny) or ny == 0.0:
                self.flagged = True
                return 0.0, None
            sigma = 1.0 / ny
            x = y / ny
        return float(sigma), x


def stable_lu_rank(A):
    """LU-based route to the smallest singular value and vector of A."""
    return LURankFactor(A)
