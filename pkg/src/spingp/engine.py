"""Sparse-precision inference for temporal GPs.

The stacked latent states at the grid times have a block-tridiagonal
precision ``K^{-1} = A^{-T} Q^{-1} A^{-1}`` (``A^{-1}`` is unit lower
block-bidiagonal with ``-Phi_i`` below the diagonal, ``Q`` block-diagonal with
``Pinf`` first). Adding the observation term gives

    P = K^{-1} + G^T Sigma^{-1} G,

which is also BTD. Everything below (marginal likelihood, its gradient and
the predictive moments) reduces to one factorization of ``P``, a couple of
block solves, and the BTD-pattern of ``P^{-1}`` from selective inversion.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import btd
from .errors import DimensionMismatch, DuplicateTimestamps, NegativeVariance, NotPositiveDefinite, SingularProcessNoise
from .kernels import Kernel, StateSpaceModel, discretize_many, state_space_of

__all__ = [
    "Dataset",
    "NoiseModel",
    "PosteriorSummary",
    "PriorPrecision",
    "assemble_prior_precision",
    "prior_precision_derivatives",
    "add_observation_term",
    "log_marginal_likelihood",
    "mll_gradient",
    "mll_and_gradient",
    "predict",
    "DEFAULT_JITTER",
    "TIME_EPS",
]

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_JITTER = 1e-10
TIME_EPS = 1e-9
VARIANCE_CLAMP = -1e-10


@dataclass(frozen=True)
class Dataset:
    """Strictly increasing times with scalar observations.

    ``values`` are what inference sees; ``shift``/``scale`` map them back to
    the original units as ``values * scale + shift``.
    """

    times: np.ndarray
    values: np.ndarray
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.values, dtype=float).ravel()
        if t.size < 1:
            raise ValueError("dataset needs at least one observation")
        if t.shape != y.shape:
            raise DimensionMismatch(f"{t.size} times but {y.size} values")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise ValueError("times and values must be finite")
        dt = np.diff(t)
        if np.any(dt == 0):
            i = int(np.flatnonzero(dt == 0)[0])
            raise DuplicateTimestamps(f"duplicate timestamp {t[i]!r} at positions {i} and {i + 1}")
        if np.any(dt < 0):
            raise ValueError("times must be strictly increasing")
        if not (self.scale > 0):
            raise ValueError("scale must be positive")
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    def __len__(self):
        return self.times.size

    def denormalize(self, values):
        return np.asarray(values) * self.scale + self.shift

    def denormalize_variance(self, var):
        return np.asarray(var) * self.scale**2

    def shifted(self, c: float) -> "Dataset":
        return Dataset(self.times + c, self.values, self.shift, self.scale)


@dataclass(frozen=True)
class NoiseModel:
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "variance", float(self.variance))
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValueError(f"noise variance must be positive, got {self.variance!r}")


@dataclass(frozen=True)
class PosteriorSummary:
    test_times: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    include_noise: bool
    mll: float = float("nan")
    mll_grad: np.ndarray = field(default_factory=lambda: np.zeros(0))
    param_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class PriorPrecision:
    """Assembled ``K^{-1}`` together with the pieces reused by gradients."""

    matrix: btd.SymBTD
    logdet_Q: float  # sum_i log det Q_i = -log det K^{-1}
    ssm: StateSpaceModel
    gaps: np.ndarray  # unique gaps
    gap_index: np.ndarray  # transition i -> unique-gap slot
    Phi: np.ndarray  # per unique gap
    Qinv: np.ndarray  # per unique gap
    Pinv: np.ndarray  # (Pinf + jitter)^{-1}
    jitter: float


def _as_noise(noise) -> NoiseModel:
    return noise if isinstance(noise, NoiseModel) else NoiseModel(noise)


def _as_ssm(kernel_or_ssm, theta=None) -> StateSpaceModel:
    if isinstance(kernel_or_ssm, StateSpaceModel):
        if theta is not None:
            raise ValueError("theta cannot override an explicit StateSpaceModel")
        return kernel_or_ssm
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return state_space_of(kernel_or_ssm, theta)


def _unique_gaps(gaps: np.ndarray, span: float):
    """Group gaps equal up to ~1e-12 of the time span.

    Regularly sampled data then needs only a handful of matrix exponentials.
    """
    if gaps.size == 0:
        return gaps, np.zeros(0, dtype=int)
    q = 1e-12 * max(span, np.finfo(float).tiny)
    keys = np.round(gaps / q)
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    return gaps[first], inv.ravel()


def _jittered_inverse(Q, eps, first_block):
    b = Q.shape[-1]
    Qj = Q + eps * np.eye(b)
    try:
        Lc = np.linalg.cholesky(Qj)
    except np.linalg.LinAlgError:
        for k in range(Q.shape[0]):
            w = np.linalg.eigvalsh(Qj[k])
            if not w.min() > 0:
                raise SingularProcessNoise(first_block(k)) from None
        raise
    Linv = np.linalg.inv(Lc)
    inv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.log(np.diagonal(Lc, axis1=-2, axis2=-1)).sum(axis=-1)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2)), logdet


def _check_times(times):
    t = np.asarray(times, dtype=float).ravel()
    if t.size < 1:
        raise ValueError("need at least one time point")
    d = np.diff(t)
    if np.any(d == 0):
        raise DuplicateTimestamps("duplicate time points in the state grid")
    if np.any(d < 0) or not np.all(np.isfinite(t)):
        raise ValueError("times must be finite and strictly increasing")
    return t


def assemble_prior_precision(times, kernel, theta=None, jitter: float = DEFAULT_JITTER) -> PriorPrecision:
    """Block-tridiagonal prior precision of the states at ``times``.

    Block ``i`` is anchored at ``times[i]``; the first carries the stationary
    prior ``Pinf``. Every process-noise block (including ``Pinf``) receives
    ``jitter * trace(Pinf) / b`` on its diagonal before inversion.
    """
    t = _check_times(times)
    ssm = _as_ssm(kernel, theta)
    b = ssm.state_dim
    n = t.size
    if not (np.all(np.isfinite(ssm.F)) and np.all(np.isfinite(ssm.Pinf))):
        raise NotPositiveDefinite(0, "state-space model is not finite at these hyperparameters")
    eps = jitter * np.trace(ssm.Pinf) / b
    gaps_u, inv = _unique_gaps(np.diff(t), t[-1] - t[0])
    Phi_u, Q_u = discretize_many(ssm, gaps_u)
    Pinv, ldP = _jittered_inverse(ssm.Pinf[None], eps, lambda k: 0)
    if gaps_u.size:
        Qinv_u, ldQ_u = _jittered_inverse(Q_u, eps, lambda k: int(np.flatnonzero(inv == k)[0]) + 1)
    else:
        Qinv_u, ldQ_u = np.zeros((0, b, b)), np.zeros(0)
    T_u = np.swapaxes(Phi_u, -1, -2) @ Qinv_u  # Phi^T Q^{-1}
    V_u = T_u @ Phi_u
    diag = np.empty((n, b, b))
    diag[0] = Pinv[0]
    diag[1:] = Qinv_u[inv]
    diag[:-1] += V_u[inv]
    diag = 0.5 * (diag + np.swapaxes(diag, 1, 2))
    upper = -T_u[inv]
    bad = ~np.isfinite(diag).all(axis=(1, 2))
    bad[:-1] |= ~np.isfinite(upper).all(axis=(1, 2))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NotPositiveDefinite(i, f"precision block {i} is not finite at these hyperparameters")
    logdet_Q = float(ldP[0] + ldQ_u[inv].sum())
    return PriorPrecision(btd.SymBTD.trusted(diag, upper), logdet_Q, ssm, gaps_u, inv, Phi_u, Qinv_u, Pinv[0], eps)


@dataclass
class _GapDerivatives:
    """Derivatives of the per-gap building blocks of ``K^{-1}``.

    Arrays carry a leading parameter axis and are indexed by unique gap,
    so they cost O(p * unique_gaps * b^3) rather than O(p * n * b^3).
    """

    dPinv: np.ndarray  # (p, b, b)
    dQinv: np.ndarray  # (p, u, b, b)
    dV: np.ndarray  # d(Phi^T Q^{-1} Phi)
    dT: np.ndarray  # d(Phi^T Q^{-1}); upper block is -T
    dlogdetQ: np.ndarray  # (p,)


def _gap_derivatives(prior: PriorPrecision) -> _GapDerivatives:
    ssm = prior.ssm
    b, p = ssm.state_dim, ssm.n_params
    inv = prior.gap_index
    _, _, dPhi_u, dQ_u = discretize_many(ssm, prior.gaps, grad=True)
    # the jitter scales with trace(Pinf), so it has a derivative too
    deps = (prior.jitter / np.trace(ssm.Pinf)) * np.trace(ssm.dPinf, axis1=1, axis2=2) if prior.jitter else np.zeros(p)
    eye = np.eye(b)
    dQ_u = dQ_u + deps[:, None, None, None] * eye
    dP = ssm.dPinf + deps[:, None, None] * eye
    Qinv_u, Pinv, Phi_u = prior.Qinv, prior.Pinv, prior.Phi
    dQinv_u = -Qinv_u @ dQ_u @ Qinv_u
    dPinv = -Pinv @ dP @ Pinv
    PhiT = np.swapaxes(Phi_u, -1, -2)
    T_u = PhiT @ Qinv_u
    dT_u = np.swapaxes(dPhi_u, -1, -2) @ Qinv_u + PhiT @ dQinv_u
    dV_u = dT_u @ Phi_u + T_u @ dPhi_u
    counts = np.bincount(inv, minlength=prior.gaps.size)
    tr_u = np.einsum("mij,pmji->pm", Qinv_u, dQ_u)
    dlogdet = np.einsum("ij,pji->p", Pinv, dP) + tr_u @ counts
    return _GapDerivatives(dPinv, dQinv_u, dV_u, dT_u, dlogdet)


def _precision_derivative_parts(times, prior: PriorPrecision):
    """Per-parameter derivative blocks of ``K^{-1}`` and of ``sum log det Q``.

    Returns ``(dDiag, dUpper, dlogdetQ)`` with shapes ``(p, n, b, b)``,
    ``(p, n-1, b, b)`` and ``(p,)``, derivatives w.r.t. natural parameters.
    """
    g = _gap_derivatives(prior)
    inv = prior.gap_index
    p, n, b = g.dPinv.shape[0], inv.size + 1, prior.ssm.state_dim
    dDiag = np.empty((p, n, b, b))
    dDiag[:, 0] = g.dPinv
    dDiag[:, 1:] = g.dQinv[:, inv]
    dDiag[:, :-1] += g.dV[:, inv]
    dDiag = 0.5 * (dDiag + np.swapaxes(dDiag, -1, -2))
    return dDiag, -g.dT[:, inv], g.dlogdetQ


def prior_precision_derivatives(times, kernel, theta=None, jitter: float = DEFAULT_JITTER) -> list[btd.SymBTD]:
    """d(K^{-1})/d(theta_k) for every natural hyperparameter, as BTD matrices."""
    prior = assemble_prior_precision(times, kernel, theta, jitter)
    dD, dU, _ = _precision_derivative_parts(times, prior)
    return [btd.SymBTD(dD[k], dU[k]) for k in range(dD.shape[0])]


def add_observation_term(prior: btd.SymBTD, ssm: StateSpaceModel, noise, mask) -> btd.SymBTD:
    """Add ``H^T H / sigma_n^2`` to every observed diagonal block."""
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != prior.n_blocks:
        raise DimensionMismatch(f"mask has {mask.size} entries for {prior.n_blocks} blocks")
    s2 = _as_noise(noise).variance
    HtH = ssm.H.T @ ssm.H
    diag = prior.diag.copy()
    diag[mask] += HtH / s2
    return btd.SymBTD.trusted(diag, prior.upper)


@dataclass
class _Fit:
    """Everything computed from one factorization on a (possibly merged) grid."""

    prior: PriorPrecision
    factor: btd.BTDFactor
    mask: np.ndarray
    y: np.ndarray  # observed values, aligned with mask
    noise: float
    mu: np.ndarray  # P^{-1} G^T Sigma^{-1} y, blocked (n, b)
    mll: float


def _fit(times, mask, y, kernel, theta, noise, jitter, backend) -> _Fit:
    s2 = _as_noise(noise).variance
    prior = assemble_prior_precision(times, kernel, theta, jitter)
    ssm = prior.ssm
    n, b = prior.matrix.n_blocks, ssm.state_dim
    P = add_observation_term(prior.matrix, ssm, s2, mask)
    f = btd.factorize(P, backend=backend)
    r = np.zeros((n, b))
    r[mask] = np.outer(y, ssm.H[0]) / s2
    mu = btd.solve(f, r.ravel()).reshape(n, b)
    mll = _mll_value(y, s2, r.ravel() @ mu.ravel(), f.logdet, prior.logdet_Q)
    return _Fit(prior, f, mask, y, s2, mu, mll)


def _gradient(fit: _Fit, times, C: btd.SymBTD | None = None, threads: int | None = None) -> np.ndarray:
    """d MLL / d log(theta) for kernel parameters then the noise variance.

    The per-parameter traces are independent; ``threads > 1`` runs them on a
    thread pool.
    """
    prior, ssm = fit.prior, fit.prior.ssm
    if C is None:
        C = btd.selective_inverse(fit.factor)
    mu = fit.mu
    # W = C + mu mu^T restricted to the BTD pattern
    W_diag = C.diag + mu[:, :, None] * mu[:, None, :]
    W_upper = C.upper + mu[:-1, :, None] * mu[1:, None, :]
    # Tr(W dK^{-1}) only needs W summed over blocks that share a gap
    gd = _gap_derivatives(prior)
    inv, nu = prior.gap_index, prior.gaps.size
    be = fit.factor.backend
    W_first = W_diag[0]
    W_q = btd.group_sum(W_diag[1:], inv, nu, be)  # blocks i >= 1 carry Q_i^{-1}
    W_v = btd.group_sum(W_diag[:-1], inv, nu, be)  # blocks i < n-1 carry Phi^T Q^{-1} Phi
    W_u = btd.group_sum(W_upper, inv, nu, be)
    g = np.empty(ssm.n_params + 1)

    def term(k):
        tr = np.sum(W_first * gd.dPinv[k])
        tr += np.sum(W_q * gd.dQinv[k]) + np.sum(W_v * gd.dV[k]) - 2.0 * np.sum(W_u * gd.dT[k])
        return -0.5 * (tr + gd.dlogdetQ[k])

    if threads is not None and threads > 1 and ssm.n_params > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            g[: ssm.n_params] = list(pool.map(term, range(ssm.n_params)))
    else:
        for k in range(ssm.n_params):
            g[k] = term(k)
    g[: ssm.n_params] *= ssm.params
    s2 = fit.noise
    h = ssm.H[0]
    obs = fit.mask
    Hmu = mu[obs] @ h
    HCH = np.einsum("i,nij,j->n", h, C.diag[obs], h)
    y = fit.y
    N = y.size
    r_mu = (Hmu @ y) / s2
    dnoise = 0.5 * (y @ y) / s2**2 - r_mu / s2 + 0.5 * (Hmu @ Hmu + HCH.sum()) / s2**2 - 0.5 * N / s2
    g[-1] = dnoise * s2
    return g


def _train_grid(data: Dataset):
    return data.times, np.ones(len(data), dtype=bool), data.values


def log_marginal_likelihood(
    data: Dataset, kernel, theta=None, noise=1.0, *, jitter=DEFAULT_JITTER, backend=None, threads: int | None = None
) -> float:
    """Log marginal likelihood of ``data``.

    With ``threads > 1`` the solve and log-determinant come from block cyclic
    reduction split over that many workers instead of the sequential
    factorization.
    """
    t, mask, y = _train_grid(data)
    if threads is None or threads <= 1:
        return _fit(t, mask, y, kernel, theta, noise, jitter, backend).mll
    s2 = _as_noise(noise).variance
    prior = assemble_prior_precision(t, kernel, theta, jitter)
    ssm = prior.ssm
    P = add_observation_term(prior.matrix, ssm, s2, mask)
    r = np.outer(y, ssm.H[0]) / s2
    res = btd.cr_solve(P, r.ravel(), threads=threads, backend=backend)
    return _mll_value(y, s2, r.ravel() @ res.x, res.logdet, prior.logdet_Q)


def _mll_value(y, s2, r_mu, logdet_P, logdet_Q) -> float:
    N = y.size
    datafit = -0.5 * (y @ y / s2 - r_mu)
    return float(datafit - 0.5 * (logdet_P + logdet_Q + N * math.log(s2)) - 0.5 * N * LOG_2PI)


def mll_and_gradient(data: Dataset, kernel, theta=None, noise=1.0, *, jitter=DEFAULT_JITTER, backend=None, threads=None):
    """MLL and its gradient w.r.t. log hyperparameters (kernel..., noise variance)."""
    t, mask, y = _train_grid(data)
    fit = _fit(t, mask, y, kernel, theta, noise, jitter, backend)
    return fit.mll, _gradient(fit, t, threads=threads)


def mll_gradient(data: Dataset, kernel, theta=None, noise=1.0, *, jitter=DEFAULT_JITTER, backend=None) -> np.ndarray:
    return mll_and_gradient(data, kernel, theta, noise, jitter=jitter, backend=backend)[1]


def merge_grid(train_times, test_times, eps: float | None = None):
    """Merge training and test times into one strictly increasing state grid.

    Test times within ``eps`` (default ``1e-9`` of the overall span) of a
    training time share that training block; test times within ``eps`` of
    each other share one block. Returns ``(grid, observed_mask, train_pos,
    test_pos)`` where ``*_pos`` index into ``grid``.
    """
    t = np.asarray(train_times, dtype=float)
    s = np.asarray(test_times, dtype=float).ravel()
    if not np.all(np.isfinite(s)):
        raise ValueError("test times must be finite")
    allt = np.concatenate([t, s])
    span = allt.max() - allt.min()
    if eps is None:
        eps = TIME_EPS * (span if span > 0 else 1.0)
    test_pos = np.full(s.size, -1, dtype=int)
    j = np.clip(np.searchsorted(t, s), 1, t.size - 1) if t.size > 1 else np.zeros(s.size, dtype=int)
    cand = np.stack([np.maximum(j - 1, 0), j])
    dist = np.abs(t[cand] - s)
    nearest = cand[np.argmin(dist, axis=0), np.arange(s.size)]
    on_train = np.abs(t[nearest] - s) <= eps
    extra = np.unique(s[~on_train])
    if extra.size:
        keep = np.concatenate([[True], np.diff(extra) > eps])
        extra = extra[keep]
    grid = np.concatenate([t, extra])
    order = np.argsort(grid, kind="stable")
    grid = grid[order]
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    train_pos = rank[: t.size]
    extra_pos = rank[t.size :]
    test_pos[on_train] = train_pos[nearest[on_train]]
    if extra.size:
        k = np.searchsorted(extra, s[~on_train], side="right") - 1
        test_pos[~on_train] = extra_pos[np.clip(k, 0, extra.size - 1)]
    mask = np.zeros(grid.size, dtype=bool)
    mask[train_pos] = True
    return grid, mask, train_pos, test_pos


def predict(
    data: Dataset,
    kernel,
    theta=None,
    noise=1.0,
    test_times=(),
    include_noise: bool = False,
    *,
    with_grad: bool = True,
    jitter=DEFAULT_JITTER,
    backend=None,
) -> PosteriorSummary:
    """Posterior mean and marginal variance of f at ``test_times``.

    Training and test times form one state grid; test blocks carry no
    observation term. The mean is ``H mu_i`` with ``mu = P^{-1} G^T Sigma^{-1} y``
    and the variance ``H C_ii H^T`` from the selective inverse ``C``.
    """
    s2 = _as_noise(noise).variance
    test_times = np.asarray(test_times, dtype=float).ravel()
    grid, mask, train_pos, test_pos = merge_grid(data.times, test_times)
    fit = _fit(grid, mask, data.values, kernel, theta, s2, jitter, backend)
    h = fit.prior.ssm.H[0]
    C = btd.selective_inverse(fit.factor)
    mean = fit.mu[test_pos] @ h
    var = np.einsum("i,nij,j->n", h, C.diag[test_pos], h)
    if np.any(var < VARIANCE_CLAMP):
        raise NegativeVariance(f"predictive variance {var.min():.3g} below clamp tolerance")
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + s2
    grad = _gradient(fit, grid, C) if with_grad else np.zeros(0)
    names = fit.prior.ssm.param_names + ("noise.variance",)
    return PosteriorSummary(test_times, mean, var, include_noise, fit.mll, grad, names)
