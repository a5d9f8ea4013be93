"""Numba kernels for symmetric block-tridiagonal recursions.

Blocks are small (b <= ~20), so the linear algebra on each block is written
out as plain loops; numba compiles them to tight code and the sequential
recursion over blocks no longer pays Python call overhead. All kernels are
``nogil`` so cyclic-reduction chunks can run on a thread pool.

Failure of a pivot Cholesky is reported through a returned index (``-1`` on
success) rather than an exception, so that callers can raise a typed error.
"""
import math

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def _mm(A, B):
    """A @ B for small blocks without BLAS dispatch."""
    p, q = A.shape
    r = B.shape[1]
    C = np.zeros((p, r))
    for i in range(p):
        for k in range(q):
            a = A[i, k]
            if a != 0.0:
                for j in range(r):
                    C[i, j] += a * B[k, j]
    return C


@njit(**_OPTS)
def _mtm(A, B):
    """A.T @ B for small blocks."""
    q, p = A.shape
    r = B.shape[1]
    C = np.zeros((p, r))
    for k in range(q):
        for i in range(p):
            a = A[k, i]
            if a != 0.0:
                for j in range(r):
                    C[i, j] += a * B[k, j]
    return C


@njit(**_OPTS)
def _mm_sub(A, B, out):
    """out -= A @ B, in place."""
    p, q = A.shape
    r = B.shape[1]
    for i in range(p):
        for k in range(q):
            a = A[i, k]
            if a != 0.0:
                for j in range(r):
                    out[i, j] -= a * B[k, j]


@njit(**_OPTS)
def _mtm_sub(A, B, out):
    """out -= A.T @ B, in place."""
    q, p = A.shape
    r = B.shape[1]
    for k in range(q):
        for i in range(p):
            a = A[k, i]
            if a != 0.0:
                for j in range(r):
                    out[i, j] -= a * B[k, j]


@njit(**_OPTS)
def _chol(A, L):
    """Lower Cholesky factor of symmetric A into L; False if not SPD."""
    b = A.shape[0]
    for j in range(b):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0):
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, b):
            t = A[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@njit(**_OPTS)
def _lsolve(L, B):
    """In place: B <- L^{-1} B for lower-triangular L."""
    b, k = B.shape
    for c in range(k):
        for i in range(b):
            t = B[i, c]
            for j in range(i):
                t -= L[i, j] * B[j, c]
            B[i, c] = t / L[i, i]


@njit(**_OPTS)
def _ltsolve(L, B):
    """In place: B <- L^{-T} B for lower-triangular L."""
    b, k = B.shape
    for c in range(k):
        for i in range(b - 1, -1, -1):
            t = B[i, c]
            for j in range(i + 1, b):
                t -= L[j, i] * B[j, c]
            B[i, c] = t / L[i, i]


@njit(**_OPTS)
def _symmetrize(S):
    b = S.shape[0]
    for i in range(b):
        for j in range(i + 1, b):
            v = 0.5 * (S[i, j] + S[j, i])
            S[i, j] = v
            S[j, i] = v


@njit(**_OPTS)
def factorize(diag, upper):
    """Block LDL^T with Cholesky pivots.

    Returns ``(L, M, logdet, fail)`` with ``fail = -1`` on success, otherwise
    the index of the first pivot that is not positive definite. Loops are
    written out per block to avoid temporaries in the recursion.
    """
    n, b = diag.shape[0], diag.shape[1]
    L = np.zeros((n, b, b))
    M = np.zeros((max(n - 1, 0), b, b))
    S = diag[0].copy()
    W = np.empty((b, b))
    logdet = 0.0
    for i in range(n):
        Li = L[i]
        # Cholesky of the symmetrized pivot S
        for j in range(b):
            s = S[j, j]
            for k in range(j):
                s -= Li[j, k] * Li[j, k]
            if not (s > 0.0):
                return L, M, 0.0, i
            d = math.sqrt(s)
            Li[j, j] = d
            logdet += math.log(s)
            for r in range(j + 1, b):
                t = 0.5 * (S[r, j] + S[j, r])
                for k in range(j):
                    t -= Li[r, k] * Li[j, k]
                Li[r, j] = t / d
        if i < n - 1:
            U = upper[i]
            # W = L_i^{-1} U_i
            for r in range(b):
                inv = 1.0 / Li[r, r]
                for c in range(b):
                    t = U[r, c]
                    for k in range(r):
                        t -= Li[r, k] * W[k, c]
                    W[r, c] = t * inv
            # M_i^T = L_i^{-T} W, stored transposed
            Mi = M[i]
            for r in range(b - 1, -1, -1):
                inv = 1.0 / Li[r, r]
                for c in range(b):
                    t = W[r, c]
                    for k in range(r + 1, b):
                        t -= Li[k, r] * Mi[c, k]
                    Mi[c, r] = t * inv
            # next pivot: D_{i+1} - W^T W
            D = diag[i + 1]
            for r in range(b):
                for c in range(b):
                    t = D[r, c]
                    for k in range(b):
                        t -= W[k, r] * W[k, c]
                    S[r, c] = t
    return L, M, logdet, -1


@njit(**_OPTS)
def solve(L, M, rhs):
    """Solve with a factor; ``rhs`` has shape (n, b, k)."""
    n = L.shape[0]
    X = rhs.copy()
    for i in range(1, n):
        _mm_sub(M[i - 1], X[i - 1], X[i])
    for i in range(n):
        _lsolve(L[i], X[i])
        _ltsolve(L[i], X[i])
    for i in range(n - 2, -1, -1):
        _mtm_sub(M[i], X[i + 1], X[i])
    return X


@njit(**_OPTS)
def selective_inverse(L, M):
    """Diagonal and super-diagonal blocks of the inverse."""
    n, b = L.shape[0], L.shape[1]
    D = np.empty((n, b, b))
    U = np.empty((max(n - 1, 0), b, b))
    Linv = np.empty((b, b))
    for i in range(n):
        # S_i^{-1} = L_i^{-T} L_i^{-1}
        Li = L[i]
        for c in range(b):
            for r in range(b):
                if r < c:
                    Linv[r, c] = 0.0
                else:
                    t = 1.0 if r == c else 0.0
                    for k in range(c, r):
                        t -= Li[r, k] * Linv[k, c]
                    Linv[r, c] = t / Li[r, r]
        Di = D[i]
        for r in range(b):
            for c in range(r, b):
                t = 0.0
                for k in range(c, b):
                    t += Linv[k, r] * Linv[k, c]
                Di[r, c] = t
                Di[c, r] = t
    for i in range(n - 2, -1, -1):
        Mi, Dn, C, Di = M[i], D[i + 1], U[i], D[i]
        # C = -M_i^T D_{i+1}
        for r in range(b):
            for c in range(b):
                t = 0.0
                for k in range(b):
                    t -= Mi[k, r] * Dn[k, c]
                C[r, c] = t
        # D_i -= C M_i, kept symmetric
        for r in range(b):
            for c in range(r, b):
                t1 = 0.0
                t2 = 0.0
                for k in range(b):
                    t1 += C[r, k] * Mi[k, c]
                    t2 += C[c, k] * Mi[k, r]
                v = Di[r, c] - 0.5 * (t1 + t2)
                Di[r, c] = v
                Di[c, r] = v
    return D, U


@njit(**_OPTS)
def cr_eliminate(A, B, R, lo, hi, Gl, Gr, g, ld):
    """Factor eliminated blocks e = 2*q for q in [lo, hi).

    Writes A_e^{-1} B_{e-1}^T into ``Gl[q]``, A_e^{-1} B_e into ``Gr[q]`` and
    A_e^{-1} R_e into ``g[q]``; ``ld[q]`` receives log det A_e. Returns the
    first failing q or -1.
    """
    n, b = A.shape[0], A.shape[1]
    Lc = np.zeros((b, b))
    for q in range(lo, hi):
        e = 2 * q
        if not _chol(A[e], Lc):
            return q
        s = 0.0
        for k in range(b):
            s += 2.0 * math.log(Lc[k, k])
        ld[q] = s
        if e > 0:
            T = B[e - 1].T.copy()
            _lsolve(Lc, T)
            _ltsolve(Lc, T)
            Gl[q] = T
        if e < n - 1:
            T = B[e].copy()
            _lsolve(Lc, T)
            _ltsolve(Lc, T)
            Gr[q] = T
        T = R[e].copy()
        _lsolve(Lc, T)
        _ltsolve(Lc, T)
        g[q] = T
    return -1


@njit(**_OPTS)
def cr_reduce(A, B, R, lo, hi, Gl, Gr, g, A2, B2, R2):
    """Schur complement onto kept blocks j = 2*m + 1 for m in [lo, hi)."""
    n = A.shape[0]
    for m in range(lo, hi):
        j = 2 * m + 1
        # left neighbour e = j - 1 is eliminated block q = m
        S = A[j] - _mtm(B[j - 1], Gr[m])
        r = R[j] - _mtm(B[j - 1], g[m])
        if j + 1 <= n - 1:
            S -= _mm(B[j], Gl[m + 1])
            r -= _mm(B[j], g[m + 1])
            if j + 2 <= n - 1:
                B2[m] = -_mm(B[j], Gr[m + 1])
        _symmetrize(S)
        A2[m] = S
        R2[m] = r


@njit(**_OPTS)
def cr_backsub(lo, hi, n, Gl, Gr, g, Xk, X):
    """Recover eliminated unknowns x_e from kept neighbours ``Xk``."""
    for q in range(lo, hi):
        e = 2 * q
        x = g[q].copy()
        if e > 0:
            x -= _mm(Gl[q], Xk[q - 1])
        if e < n - 1:
            x -= _mm(Gr[q], Xk[q])
        X[e] = x
        # kept blocks interleave: X[2m+1] = Xk[m]
        if e + 1 <= n - 1:
            X[e + 1] = Xk[q]


@njit(**_OPTS)
def group_sum(blocks, groups, n_groups):
    """out[g] = sum of blocks[i] with groups[i] == g."""
    b1, b2 = blocks.shape[1], blocks.shape[2]
    out = np.zeros((n_groups, b1, b2))
    for i in range(blocks.shape[0]):
        out[groups[i]] += blocks[i]
    return out
