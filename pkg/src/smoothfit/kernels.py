"""Numeric inner loops.

Everything in this module operates on plain numpy arrays (CSC/CSR index
triplets, dense work vectors) so that the same source compiles under numba
``njit`` and also runs as ordinary Python when ``SMOOTHFIT_NUMBA=0``.

The sparse Cholesky routines follow the classic up-looking algorithm
(elimination tree + row subtree traversal, cf. Davis, "Direct Methods for
Sparse Linear Systems", 2006).  The row-wise QR uses Givens rotations so
that small diagonal entries can be detected and the offending columns
dropped, following Heath (1982).
"""

import numpy as np

from ._backend import maybe_njit

_opts = dict(cache=True)


# ---------------------------------------------------------------------------
# B-spline evaluation
# ---------------------------------------------------------------------------

@maybe_njit(**_opts)
def bspline_eval(x, knots, degree, out):
    """Fill ``out`` (len(x) x k) with B-spline basis values.

    ``knots`` holds k + degree + 1 non-decreasing breakpoints; column j of
    ``out`` is the degree-``degree`` B-spline supported on
    ``knots[j:j+degree+2]``.  Evaluation uses the stable triangular scheme
    of de Boor; points equal to the right boundary are folded into the last
    interval so the basis stays a partition of unity on the closed range.
    """
    n = x.shape[0]
    k = out.shape[1]
    d = degree
    left = np.zeros(d + 1)
    right = np.zeros(d + 1)
    vals = np.zeros(d + 1)
    lo = knots[d]
    hi = knots[k]
    for idx in range(n):
        xv = x[idx]
        # locate span i with knots[i] <= xv < knots[i+1], clamped to the
        # valid region [d, k-1]
        if xv >= hi:
            span = k - 1
        else:
            span = d
            while span < k - 1 and xv >= knots[span + 1]:
                span += 1
        vals[0] = 1.0
        for j in range(1, d + 1):
            left[j] = xv - knots[span + 1 - j]
            right[j] = knots[span + j] - xv
            saved = 0.0
            for r in range(j):
                den = right[r + 1] + left[j - r]
                if den != 0.0:
                    temp = vals[r] / den
                else:
                    temp = 0.0
                vals[r] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            vals[j] = saved
        for j in range(d + 1):
            col = span - d + j
            if 0 <= col < k:
                out[idx, col] = vals[j]
    return out


# ---------------------------------------------------------------------------
# Sparse Cholesky (CSC, up-looking)
# ---------------------------------------------------------------------------

@maybe_njit(**_opts)
def etree(n, Ap, Ai):
    """Elimination tree of a symmetric CSC matrix (full pattern stored)."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@maybe_njit(**_opts)
def _ereach(n, Ap, Ai, k, parent, mark, stack, out):
    """Nonzero pattern of row k of L: reach of A(0:k,k) in the etree.

    Returns ``top``; the pattern sits in ``out[top:n]`` in topological
    order.  ``mark`` must persist between calls (k-stamped workspace).
    """
    top = n
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            stack[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            length -= 1
            top -= 1
            out[top] = stack[length]
    return top


@maybe_njit(**_opts)
def chol_symbolic(n, Ap, Ai, parent):
    """Column pointers of the Cholesky factor (diagonal included)."""
    counts = np.ones(n, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    stack = np.zeros(n, dtype=np.int64)
    out = np.zeros(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(n, Ap, Ai, k, parent, mark, stack, out)
        for t in range(top, n):
            counts[out[t]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    return Lp


@maybe_njit(**_opts)
def chol_numeric(n, Ap, Ai, Ax, parent, Lp, Li, Lx):
    """Up-looking numeric factorization; returns -1 or the failing pivot.

    Column j of L stores its diagonal entry first, remaining row indices
    ascending.  ``Li``/``Lx`` must be sized ``Lp[n]``.
    """
    c = Lp[:n].copy()
    x = np.zeros(n)
    mark = np.full(n, -1, dtype=np.int64)
    stack = np.zeros(n, dtype=np.int64)
    out = np.zeros(n, dtype=np.int64)
    for k in range(n):
        top = _ereach(n, Ap, Ai, k, parent, mark, stack, out)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            if Ai[p] <= k:
                x[Ai[p]] = Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = out[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if d <= 0.0 or not np.isfinite(d):
            return k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = np.sqrt(d)
    return -1


@maybe_njit(**_opts)
def lower_solve(n, Lp, Li, Lx, b):
    """In-place forward solve L y = b for lower-triangular CSC L."""
    for j in range(n):
        bj = b[j] / Lx[Lp[j]]
        b[j] = bj
        if bj != 0.0:
            for p in range(Lp[j] + 1, Lp[j + 1]):
                b[Li[p]] -= Lx[p] * bj
    return b


@maybe_njit(**_opts)
def lower_tsolve(n, Lp, Li, Lx, b):
    """In-place backward solve L^T y = b."""
    for j in range(n - 1, -1, -1):
        s = b[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * b[Li[p]]
        b[j] = s / Lx[Lp[j]]
    return b


@maybe_njit(**_opts)
def lower_solve_many(n, Lp, Li, Lx, B):
    """Forward solve with a dense block of right-hand sides (columns)."""
    m = B.shape[1]
    for col in range(m):
        for j in range(n):
            bj = B[j, col] / Lx[Lp[j]]
            B[j, col] = bj
            if bj != 0.0:
                for p in range(Lp[j] + 1, Lp[j + 1]):
                    B[Li[p], col] -= Lx[p] * bj
    return B


@maybe_njit(**_opts)
def lower_tsolve_many(n, Lp, Li, Lx, B):
    m = B.shape[1]
    for col in range(m):
        for j in range(n - 1, -1, -1):
            s = B[j, col]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                s -= Lx[p] * B[Li[p], col]
            B[j, col] = s / Lx[Lp[j]]
    return B


@maybe_njit(**_opts)
def invert_lower_csc(n, Lp, Li, Lx):
    """Columns of L^{-1}; returns CSC triplets.

    Each column is an independent sparse forward solve with a unit vector,
    so callers may fan the columns out across workers if they wish.
    """
    nnz_cap = 0
    work = np.zeros(n)
    # first pass: count nonzeros per column
    counts = np.zeros(n, dtype=np.int64)
    for j in range(n):
        for i in range(n):
            work[i] = 0.0
        work[j] = 1.0
        for jj in range(j, n):
            bj = work[jj] / Lx[Lp[jj]]
            work[jj] = bj
            if bj != 0.0:
                for p in range(Lp[jj] + 1, Lp[jj + 1]):
                    work[Li[p]] -= Lx[p] * bj
        cnt = 0
        for i in range(j, n):
            if work[i] != 0.0:
                cnt += 1
        counts[j] = cnt
        nnz_cap += cnt
    Ip = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Ip[j + 1] = Ip[j] + counts[j]
    Ii = np.zeros(nnz_cap, dtype=np.int64)
    Ix = np.zeros(nnz_cap)
    for j in range(n):
        for i in range(n):
            work[i] = 0.0
        work[j] = 1.0
        for jj in range(j, n):
            bj = work[jj] / Lx[Lp[jj]]
            work[jj] = bj
            if bj != 0.0:
                for p in range(Lp[jj] + 1, Lp[jj + 1]):
                    work[Li[p]] -= Lx[p] * bj
        q = Ip[j]
        for i in range(j, n):
            if work[i] != 0.0:
                Ii[q] = i
                Ix[q] = work[i]
                q += 1
    return Ip, Ii, Ix


@maybe_njit(**_opts)
def sq_fwd_solve_cols(n, Lp, Li, Lx, B):
    """Sum of squares of L^{-1} B per dense column; used for trace terms."""
    m = B.shape[1]
    total = 0.0
    work = np.zeros(n)
    for col in range(m):
        for i in range(n):
            work[i] = B[i, col]
        for j in range(n):
            bj = work[j] / Lx[Lp[j]]
            work[j] = bj
            if bj != 0.0:
                for p in range(Lp[j] + 1, Lp[j + 1]):
                    work[Li[p]] -= Lx[p] * bj
        for i in range(n):
            total += work[i] * work[i]
    return total


# ---------------------------------------------------------------------------
# Row-wise Givens QR
# ---------------------------------------------------------------------------

@maybe_njit(**_opts)
def qr_insert_rows(R, Xp, Xi, Xx, nrows):
    """Rotate CSR rows into the dense upper-triangular accumulator R.

    Diagonal entries of R stay non-negative because each rotation is built
    from hypot.  Rows may arrive in any order.
    """
    p = R.shape[0]
    r = np.zeros(p)
    for row in range(nrows):
        for i in range(p):
            r[i] = 0.0
        lead = p
        for q in range(Xp[row], Xp[row + 1]):
            r[Xi[q]] = Xx[q]
            if Xi[q] < lead:
                lead = Xi[q]
        for j in range(lead, p):
            rj = r[j]
            if rj == 0.0:
                continue
            a = R[j, j]
            hyp = np.hypot(a, rj)
            if hyp == 0.0:
                continue
            c = a / hyp
            s = rj / hyp
            R[j, j] = hyp
            r[j] = 0.0
            for col in range(j + 1, p):
                t1 = R[j, col]
                t2 = r[col]
                R[j, col] = c * t1 + s * t2
                r[col] = -s * t1 + c * t2
    return R


@maybe_njit(**_opts)
def chol_downdate(R, u):
    """Rank-one downdate of dense upper-triangular R: R'^T R' = R^T R - u u^T.

    Returns 0 on success, 1 if the downdated matrix is not positive
    definite.  LINPACK-style hyperbolic rotations.
    """
    p = R.shape[0]
    for j in range(p):
        rjj = R[j, j]
        d = rjj * rjj - u[j] * u[j]
        if d <= 0.0:
            return 1
        dj = np.sqrt(d)
        c = dj / rjj
        s = u[j] / rjj
        R[j, j] = dj
        for col in range(j + 1, p):
            R[j, col] = (R[j, col] - s * u[col]) / c
            u[col] = c * u[col] - s * R[j, col]
    return 0


# ---------------------------------------------------------------------------
# Cox proportional-hazard accumulators
# ---------------------------------------------------------------------------

@maybe_njit(**_opts)
def coxph_llk(eta, delta, block_ends, r_l):
    """Partial log-likelihood for data sorted by non-increasing time.

    ``block_ends[l]`` is the exclusive end of the l-th tied-time block, so
    the risk set of block l is the prefix ``0:block_ends[l]``.  Ties use the
    Breslow multiplier ``r_l``.
    """
    c = eta[0]
    n = eta.shape[0]
    for i in range(1, n):
        if eta[i] > c:
            c = eta[i]
    total = 0.0
    wsum = 0.0
    start = 0
    for l in range(block_ends.shape[0]):
        end = block_ends[l]
        for i in range(start, end):
            wsum += np.exp(eta[i] - c)
            if delta[i] == 1:
                total += eta[i]
        if r_l[l] > 0:
            total -= r_l[l] * (np.log(wsum) + c)
        start = end
    return total


@maybe_njit(**_opts)
def coxph_grad(eta, delta, block_ends, r_l, X):
    c = eta[0]
    n = eta.shape[0]
    for i in range(1, n):
        if eta[i] > c:
            c = eta[i]
    p = X.shape[1]
    grad = np.zeros(p)
    acc = np.zeros(p)
    wsum = 0.0
    start = 0
    for l in range(block_ends.shape[0]):
        end = block_ends[l]
        for i in range(start, end):
            w = np.exp(eta[i] - c)
            wsum += w
            for j in range(p):
                acc[j] += w * X[i, j]
                if delta[i] == 1:
                    grad[j] += X[i, j]
        if r_l[l] > 0:
            coef = r_l[l] / wsum
            for j in range(p):
                grad[j] -= coef * acc[j]
        start = end
    return grad


@maybe_njit(**_opts)
def coxph_neg_hess(eta, delta, block_ends, r_l, X):
    """Negative Hessian of the partial log-likelihood (dense, PSD)."""
    c = eta[0]
    n = eta.shape[0]
    for i in range(1, n):
        if eta[i] > c:
            c = eta[i]
    p = X.shape[1]
    H = np.zeros((p, p))
    acc = np.zeros(p)
    M = np.zeros((p, p))
    wsum = 0.0
    start = 0
    for l in range(block_ends.shape[0]):
        end = block_ends[l]
        for i in range(start, end):
            w = np.exp(eta[i] - c)
            wsum += w
            for a in range(p):
                xa = X[i, a]
                acc[a] += w * xa
                for b in range(a, p):
                    M[a, b] += w * xa * X[i, b]
        if r_l[l] > 0:
            coef = r_l[l] / wsum
            coef2 = r_l[l] / (wsum * wsum)
            for a in range(p):
                for b in range(a, p):
                    H[a, b] += coef * M[a, b] - coef2 * acc[a] * acc[b]
        start = end
    for a in range(p):
        for b in range(a + 1, p):
            H[b, a] = H[a, b]
    return H
