"""Symmetric block-tridiagonal (BTD) linear algebra.

A :class:`SymBTD` stores ``n`` diagonal ``b x b`` blocks and ``n - 1``
super-diagonal blocks; the sub-diagonal blocks are their transposes. The
sequential path factorizes as ``M = L D L^T`` with unit block-bidiagonal
``L`` (multipliers ``M_i``) and block-diagonal ``D`` (pivots ``S_i``), keeping
Cholesky factors of the pivots. :func:`cr_solve` is the block cyclic
reduction alternative whose per-level work is split across threads.

The hot recursions exist twice, as numba kernels and as numpy code; which
one runs is chosen by :mod:`spingp._accel` or per call via ``backend=``.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .. import _accel
from ..errors import DimensionMismatch, NotPositiveDefinite
from . import _numpy_kernels

__all__ = [
    "SymBTD",
    "BTDFactor",
    "CRResult",
    "factorize",
    "solve",
    "logdet",
    "selective_inverse",
    "trace_btd_product",
    "matvec",
    "group_sum",
    "cr_solve",
    "dump",
    "load",
    "get_backend",
]

_BACKENDS = {"numpy": _numpy_kernels}


def get_backend(name: str | None = None):
    """Kernel module for ``name`` (``"numba"``/``"numpy"``), default per env."""
    name = name or _accel.default_backend()
    if name not in _BACKENDS:
        if name == "numba" and _accel.NUMBA_AVAILABLE:
            from . import _numba_kernels

            _BACKENDS["numba"] = _numba_kernels
        else:
            raise ValueError(f"unknown or unavailable backend {name!r}")
    return _BACKENDS[name]


@dataclass(frozen=True)
class SymBTD:
    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.diag, dtype=float)
        if d.ndim != 3 or d.shape[1] != d.shape[2] or d.shape[0] < 1:
            raise DimensionMismatch(f"diag must have shape (n, b, b), got {d.shape}")
        n, b = d.shape[0], d.shape[1]
        u = np.ascontiguousarray(self.upper, dtype=float).reshape(-1, b, b) if n > 1 else np.zeros((0, b, b))
        if u.shape != (n - 1, b, b):
            raise DimensionMismatch(f"upper must have shape {(n - 1, b, b)}, got {u.shape}")
        asym = np.abs(d - np.swapaxes(d, 1, 2)).max()
        if asym > 1e-12 * max(np.abs(d).max(), 1e-300):
            raise ValueError(f"diagonal blocks are not symmetric (max asymmetry {asym:.3g})")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "upper", u)

    @classmethod
    def trusted(cls, diag: np.ndarray, upper: np.ndarray) -> "SymBTD":
        """Wrap float arrays of the right shapes without validation (hot paths)."""
        m = object.__new__(cls)
        object.__setattr__(m, "diag", np.ascontiguousarray(diag, dtype=float))
        object.__setattr__(m, "upper", np.ascontiguousarray(upper, dtype=float))
        return m

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    @property
    def block_dim(self) -> int:
        return self.diag.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        s = self.n_blocks * self.block_dim
        return (s, s)

    @classmethod
    def identity(cls, n: int, b: int) -> "SymBTD":
        return cls(np.broadcast_to(np.eye(b), (n, b, b)), np.zeros((n - 1, b, b)))

    @classmethod
    def from_dense(cls, A, b: int) -> "SymBTD":
        A = np.asarray(A, dtype=float)
        if A.shape[0] != A.shape[1] or A.shape[0] % b:
            raise DimensionMismatch(f"cannot split {A.shape} into {b}x{b} blocks")
        n = A.shape[0] // b
        blocks = A.reshape(n, b, n, b).transpose(0, 2, 1, 3)
        i = np.arange(n)
        return cls(blocks[i, i], blocks[i[:-1], i[1:]])

    def to_dense(self) -> np.ndarray:
        n, b = self.n_blocks, self.block_dim
        out = np.zeros((n, b, n, b))
        i = np.arange(n)
        out[i, :, i, :] = self.diag
        out[i[:-1], :, i[1:], :] = self.upper
        out[i[1:], :, i[:-1], :] = np.swapaxes(self.upper, 1, 2)
        return out.reshape(n * b, n * b)

    def __add__(self, other: "SymBTD") -> "SymBTD":
        _check_same(self, other)
        return SymBTD(self.diag + other.diag, self.upper + other.upper)

    def scaled(self, c: float) -> "SymBTD":
        return SymBTD(c * self.diag, c * self.upper)


@dataclass(frozen=True)
class BTDFactor:
    """Block LDL^T factor: pivot Cholesky factors ``L`` and multipliers ``M``."""

    L: np.ndarray
    M: np.ndarray
    logdet: float
    backend: str

    @property
    def n_blocks(self) -> int:
        return self.L.shape[0]

    @property
    def block_dim(self) -> int:
        return self.L.shape[1]

    def reconstruct(self) -> SymBTD:
        """The factored matrix rebuilt from ``L`` and ``M``."""
        S = self.L @ np.swapaxes(self.L, 1, 2)
        diag = S.copy()
        diag[1:] += self.M @ S[:-1] @ np.swapaxes(self.M, 1, 2)
        upper = S[:-1] @ np.swapaxes(self.M, 1, 2)
        return SymBTD(0.5 * (diag + np.swapaxes(diag, 1, 2)), upper)


class CRResult(NamedTuple):
    x: np.ndarray
    logdet: float


def _check_same(a: SymBTD, b: SymBTD):
    if a.n_blocks != b.n_blocks or a.block_dim != b.block_dim:
        raise DimensionMismatch(
            f"BTD shapes differ: ({a.n_blocks}, {a.block_dim}) vs ({b.n_blocks}, {b.block_dim})"
        )


def _blocked_rhs(rhs, n, b):
    rhs = np.asarray(rhs, dtype=float)
    vec = rhs.ndim == 1
    R = rhs.reshape(-1, 1) if vec else rhs
    if R.ndim != 2 or R.shape[0] != n * b:
        raise DimensionMismatch(f"rhs has {rhs.shape[0] if rhs.ndim else 0} rows, expected {n * b}")
    return np.ascontiguousarray(R.reshape(n, b, R.shape[1])), vec


def factorize(m: SymBTD, backend: str | None = None) -> BTDFactor:
    """Block Thomas (LDL^T) factorization.

    Raises :class:`NotPositiveDefinite` with the index of the first failing
    pivot.
    """
    name = backend or _accel.default_backend()
    L, M, ld, fail = get_backend(name).factorize(m.diag, m.upper)
    if fail >= 0:
        raise NotPositiveDefinite(fail)
    if not np.isfinite(ld):
        bad = ~np.isfinite(L).all(axis=(1, 2))
        raise NotPositiveDefinite(int(np.argmax(bad)) if bad.any() else 0)
    return BTDFactor(L, M, float(ld), name)


def solve(f: BTDFactor, rhs) -> np.ndarray:
    """Solve ``M X = rhs`` for an ``(n*b,)`` or ``(n*b, k)`` right-hand side."""
    n, b = f.n_blocks, f.block_dim
    R, vec = _blocked_rhs(rhs, n, b)
    X = get_backend(f.backend).solve(f.L, f.M, R).reshape(n * b, -1)
    return X[:, 0] if vec else X


def logdet(f: BTDFactor) -> float:
    return f.logdet


def selective_inverse(f: BTDFactor) -> SymBTD:
    """Exactly the BTD-pattern blocks of the inverse of the factored matrix."""
    D, U = get_backend(f.backend).selective_inverse(f.L, f.M)
    return SymBTD.trusted(D, U)


def trace_btd_product(s: SymBTD, m: SymBTD) -> float:
    """Tr(S M) using only BTD blocks of both (exact when either is BTD)."""
    _check_same(s, m)
    return float(np.einsum("kij,kji->", s.diag, m.diag) + 2.0 * np.einsum("kij,kij->", s.upper, m.upper))


def matvec(m: SymBTD, v) -> np.ndarray:
    n, b = m.n_blocks, m.block_dim
    V, vec = _blocked_rhs(v, n, b)
    out = m.diag @ V
    if n > 1:
        out[:-1] += m.upper @ V[1:]
        out[1:] += np.swapaxes(m.upper, 1, 2) @ V[:-1]
    out = out.reshape(n * b, -1)
    return out[:, 0] if vec else out


def group_sum(blocks, groups, n_groups: int, backend: str | None = None) -> np.ndarray:
    """Sum ``(m, b, b)`` blocks into ``n_groups`` bins given by integer ``groups``."""
    blocks = np.ascontiguousarray(blocks, dtype=float)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    return get_backend(backend).group_sum(blocks, groups, int(n_groups))


def _default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


_MIN_CHUNK = 32


def _spans(count: int, threads: int):
    k = max(1, min(threads, count // _MIN_CHUNK))
    edges = np.linspace(0, count, k + 1).astype(int)
    return list(zip(edges[:-1], edges[1:]))


def _parallel(pool, threads, fn, count, head, tail):
    """Run ``fn(*head, lo, hi, *tail)`` over chunks of ``range(count)``."""
    spans = _spans(count, threads)
    if pool is None or len(spans) == 1:
        return [fn(*head, lo, hi, *tail) for lo, hi in spans]
    futs = [pool.submit(fn, *head, lo, hi, *tail) for lo, hi in spans]
    return [f.result() for f in futs]


def cr_solve(m: SymBTD, rhs, threads: int | None = None, backend: str | None = None) -> CRResult:
    """Block cyclic reduction solve, also returning ``log det(M)``.

    Each level eliminates the even-indexed blocks (pairwise non-adjacent, so
    their pivots are independent) and forms the Schur complement on the odd
    blocks, which is again symmetric BTD. Work inside a level is split over
    ``threads`` workers; levels are barriers.
    """
    n, b = m.n_blocks, m.block_dim
    R, vec = _blocked_rhs(rhs, n, b)
    threads = _default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    kern = get_backend(backend)
    A, B = m.diag, m.upper
    orig = np.arange(n)
    levels = []
    total = 0.0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while A.shape[0] > 1:
            nl = A.shape[0]
            ne, nk = (nl + 1) // 2, nl // 2
            k = R.shape[2]
            Gl = np.zeros((ne, b, b))
            Gr = np.zeros((ne, b, b))
            g = np.zeros((ne, b, k))
            ld = np.zeros(ne)
            fails = [q for q in _parallel(pool, threads, kern.cr_eliminate, ne, (A, B, R), (Gl, Gr, g, ld)) if q >= 0]
            if fails:
                raise NotPositiveDefinite(orig[2 * min(fails)])
            total += ld.sum()
            A2 = np.zeros((nk, b, b))
            B2 = np.zeros((max(nk - 1, 0), b, b))
            R2 = np.zeros((nk, b, k))
            _parallel(pool, threads, kern.cr_reduce, nk, (A, B, R), (Gl, Gr, g, A2, B2, R2))
            levels.append((nl, ne, Gl, Gr, g))
            A, B, R, orig = A2, B2, R2, orig[1::2]
        # single remaining block
        X = np.zeros((1, b, R.shape[2]))
        ld = np.zeros(1)
        fail = kern.cr_eliminate(A, B, R, 0, 1, np.zeros((1, b, b)), np.zeros((1, b, b)), X, ld)
        if fail >= 0:
            raise NotPositiveDefinite(orig[0])
        total += ld[0]
        for nl, ne, Gl, Gr, g in reversed(levels):
            Xn = np.zeros((nl, b, g.shape[2]))
            _parallel(pool, threads, kern.cr_backsub, ne, (), (nl, Gl, Gr, g, X, Xn))
            X = Xn
    finally:
        if pool is not None:
            pool.shutdown()
    X = X.reshape(n * b, -1)
    return CRResult(X[:, 0] if vec else X, float(total))


def dump(m: SymBTD, path) -> None:
    """Write ``m`` as plain text: header ``n_blocks b``, then blocks in band order.

    Band order is all diagonal blocks followed by all super-diagonal blocks;
    each block is ``b`` rows of ``b`` numbers.
    """
    n, b = m.n_blocks, m.block_dim
    with open(path, "w") as fh:
        fh.write("%%SymBTD block-tridiagonal\n")
        fh.write(f"{n} {b}\n")
        for blk in list(m.diag) + list(m.upper):
            np.savetxt(fh, blk, fmt="%.17g")


def load(path) -> SymBTD:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("%")]
    n, b = (int(x) for x in lines[0].split())
    vals = np.array(" ".join(lines[1:]).split(), dtype=float)
    if vals.size != (2 * n - 1) * b * b:
        raise DimensionMismatch(f"expected {(2 * n - 1) * b * b} values, found {vals.size}")
    blocks = vals.reshape(2 * n - 1, b, b)
    return SymBTD(blocks[:n], blocks[n:])
