"""Pure numpy/scipy versions of the block recursions.

Same signatures and return conventions as ``_numba_kernels``. The Thomas
recursions loop over blocks in Python; the cyclic-reduction phases are
batched over their index range with stacked numpy linear algebra.
"""
import numpy as np
import scipy.linalg as sla


def _sym(S):
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def _chol(S):
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return None
    # LAPACK lets NaN through; a usable factor has a positive diagonal
    if not np.all(np.diagonal(L, axis1=-2, axis2=-1) > 0):
        return None
    return L


def _chol_solve(L, B):
    return sla.solve_triangular(L, sla.solve_triangular(L, B, lower=True), lower=True, trans="T")


def factorize(diag, upper):
    n, b = diag.shape[0], diag.shape[1]
    L = np.zeros((n, b, b))
    M = np.zeros((max(n - 1, 0), b, b))
    S = diag[0]
    logdet = 0.0
    for i in range(n):
        Li = _chol(_sym(S))
        if Li is None:
            return L, M, 0.0, i
        L[i] = Li
        logdet += 2.0 * np.log(np.diag(Li)).sum()
        if i < n - 1:
            W = sla.solve_triangular(Li, upper[i], lower=True)
            M[i] = sla.solve_triangular(Li, W, lower=True, trans="T").T
            S = diag[i + 1] - W.T @ W
    return L, M, logdet, -1


def solve(L, M, rhs):
    n = L.shape[0]
    X = rhs.copy()
    for i in range(1, n):
        X[i] -= M[i - 1] @ X[i - 1]
    for i in range(n):
        X[i] = _chol_solve(L[i], X[i])
    for i in range(n - 2, -1, -1):
        X[i] -= M[i].T @ X[i + 1]
    return X


def selective_inverse(L, M):
    n, b = L.shape[0], L.shape[1]
    Linv = np.linalg.inv(L) if n else L
    D = np.swapaxes(Linv, -1, -2) @ Linv
    U = np.empty((max(n - 1, 0), b, b))
    for i in range(n - 2, -1, -1):
        C = -(M[i].T @ D[i + 1])
        U[i] = C
        D[i] = _sym(D[i] - C @ M[i])
    return D, U


def _batched_chol_solve(Lc, B):
    # Lc: (m, b, b) lower; B: (m, b, k)
    Linv = np.linalg.inv(Lc)
    return np.swapaxes(Linv, -1, -2) @ (Linv @ B)


def cr_eliminate(A, B, R, lo, hi, Gl, Gr, g, ld):
    n = A.shape[0]
    if hi <= lo:
        return -1
    e = 2 * np.arange(lo, hi)
    try:
        Lc = np.linalg.cholesky(A[e])
    except np.linalg.LinAlgError:
        for q in range(lo, hi):
            if _chol(A[2 * q]) is None:
                return q
        raise
    if not np.all(np.isfinite(Lc)):
        # numpy may return NaN factors instead of raising for some inputs
        bad = np.flatnonzero(~np.all(np.isfinite(Lc), axis=(1, 2)))
        return lo + int(bad[0])
    ld[lo:hi] = 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(axis=1)
    q = np.arange(lo, hi)
    left = e > 0
    if np.any(left):
        Gl[q[left]] = _batched_chol_solve(Lc[left], np.swapaxes(B[e[left] - 1], -1, -2))
    right = e < n - 1
    if np.any(right):
        Gr[q[right]] = _batched_chol_solve(Lc[right], B[e[right]])
    g[lo:hi] = _batched_chol_solve(Lc, R[e])
    return -1


def cr_reduce(A, B, R, lo, hi, Gl, Gr, g, A2, B2, R2):
    n = A.shape[0]
    if hi <= lo:
        return
    m = np.arange(lo, hi)
    j = 2 * m + 1
    Bl = np.swapaxes(B[j - 1], -1, -2)
    S = A[j] - Bl @ Gr[m]
    r = R[j] - Bl @ g[m]
    has_r = j + 1 <= n - 1
    if np.any(has_r):
        mr, jr = m[has_r], j[has_r]
        S[has_r] -= B[jr] @ Gl[mr + 1]
        r[has_r] -= B[jr] @ g[mr + 1]
        has_b = jr + 2 <= n - 1
        if np.any(has_b):
            B2[mr[has_b]] = -(B[jr[has_b]] @ Gr[mr[has_b] + 1])
    A2[lo:hi] = _sym(S)
    R2[lo:hi] = r


def cr_backsub(lo, hi, n, Gl, Gr, g, Xk, X):
    if hi <= lo:
        return
    q = np.arange(lo, hi)
    e = 2 * q
    x = g[lo:hi].copy()
    left = e > 0
    if np.any(left):
        x[left] -= Gl[q[left]] @ Xk[q[left] - 1]
    right = e < n - 1
    if np.any(right):
        x[right] -= Gr[q[right]] @ Xk[q[right]]
        X[e[right] + 1] = Xk[q[right]]
    X[e] = x


def group_sum(blocks, groups, n_groups):
    out = np.zeros((n_groups,) + blocks.shape[1:])
    np.add.at(out, groups, blocks)
    return out
