"""Reference implementations: a dense O(N^3) GP and a Kalman filter/RTS smoother.

Both are deliberately written the textbook way and share nothing with the
sparse-precision engine beyond the kernel definitions, so agreement between
the three is meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .kernels import Kernel, StateSpaceModel, discretize_many, kernel_eval, kernel_eval_grad, state_space_of

__all__ = [
    "DenseGPResult",
    "KalmanResult",
    "dense_gp_mll",
    "dense_gp_mll_and_gradient",
    "dense_gp_predict",
    "kf_filter",
    "kf_mll",
    "kf_mll_and_gradient",
    "kf_rts_predict",
    "DENSE_CAP",
]

LOG_2PI = math.log(2.0 * math.pi)
DENSE_CAP = 2000


def _noise_var(noise) -> float:
    return float(getattr(noise, "variance", noise))


def _kernel(kernel, theta):
    return kernel if theta is None else kernel.with_params(theta)


@dataclass(frozen=True)
class DenseGPResult:
    mll: float
    mean: np.ndarray
    variance: np.ndarray
    cond: float


def _lag_index(t):
    """Unique pairwise lags of ``t`` and the (n, n) index map into them."""
    n = t.size
    i, j = np.triu_indices(n)
    u, inv = np.unique(np.abs(t[j] - t[i]), return_inverse=True)
    idx = np.empty((n, n), dtype=np.intp)
    idx[i, j] = inv
    idx[j, i] = inv
    return u, idx


def _dense_chol(data, kernel, s2, cap, lags=None):
    t = data.times
    if t.size > cap:
        raise ValueError(f"dense GP limited to {cap} points, got {t.size}")
    u, idx = _lag_index(t) if lags is None else lags
    K = kernel_eval(kernel, u, 0.0)[idx]
    Ky = K + s2 * np.eye(t.size)
    try:
        c = sla.cho_factor(Ky, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"dense covariance is not positive definite: {exc}") from None
    return K, c


def _mll_from_chol(c, y):
    alpha = sla.cho_solve(c, y)
    logdet = 2.0 * np.log(np.diag(c[0])).sum()
    return -0.5 * y @ alpha - 0.5 * logdet - 0.5 * y.size * LOG_2PI, alpha


def dense_gp_mll(data, kernel: Kernel, theta=None, noise=1.0, cap: int = DENSE_CAP) -> float:
    kernel = _kernel(kernel, theta)
    _, c = _dense_chol(data, kernel, _noise_var(noise), cap)
    return float(_mll_from_chol(c, data.values)[0])


def dense_gp_mll_and_gradient(data, kernel: Kernel, theta=None, noise=1.0, cap: int = DENSE_CAP):
    """MLL and d MLL / d log(theta), noise variance last."""
    kernel = _kernel(kernel, theta)
    s2 = _noise_var(noise)
    t = data.times
    lags = _lag_index(t) if t.size <= cap else None
    _, c = _dense_chol(data, kernel, s2, cap, lags)
    mll, alpha = _mll_from_chol(c, data.values)
    Kinv = sla.cho_solve(c, np.eye(t.size))
    W = np.outer(alpha, alpha) - Kinv
    u, idx = lags
    dk = kernel_eval_grad(kernel, u, 0.0)
    # W is symmetric, so sum_ij W_ij dK_ij = sum over lags of dk times W's mass there
    wsum = np.bincount(idx.ravel(), weights=W.ravel(), minlength=u.size)
    g = 0.5 * (dk @ wsum) * kernel.params()
    gn = 0.5 * np.trace(W) * s2
    return float(mll), np.append(g, gn)


def dense_gp_predict(data, kernel: Kernel, theta=None, noise=1.0, test_times=(), include_noise=False, cap=DENSE_CAP):
    kernel = _kernel(kernel, theta)
    s2 = _noise_var(noise)
    t = data.times
    if t.size < 1:
        raise ValueError("need at least one training point")
    s = np.asarray(test_times, dtype=float).ravel()
    K, c = _dense_chol(data, kernel, s2, cap)
    mll, alpha = _mll_from_chol(c, data.values)
    Ks = kernel_eval(kernel, s[:, None], t[None, :])
    mean = Ks @ alpha
    V = sla.solve_triangular(c[0], Ks.T, lower=True)
    var = kernel_eval(kernel, s, s) - np.sum(V * V, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + s2
    return DenseGPResult(float(mll), mean, var, float(np.linalg.cond(K + s2 * np.eye(t.size))))


@dataclass(frozen=True)
class KalmanResult:
    """Per-step filtered moments and log-likelihood contributions."""

    means: np.ndarray
    covs: np.ndarray
    pred_means: np.ndarray
    pred_covs: np.ndarray
    loglik: np.ndarray
    Phi: np.ndarray  # transition into step k (identity at k = 0)

    @property
    def mll(self) -> float:
        return float(self.loglik.sum())


def _ssm(kernel_or_ssm, theta=None) -> StateSpaceModel:
    if isinstance(kernel_or_ssm, StateSpaceModel):
        return kernel_or_ssm
    return state_space_of(kernel_or_ssm, theta)


def kf_filter(times, values, ssm: StateSpaceModel, noise, observed=None) -> KalmanResult:
    """Kalman filter from the stationary prior; unobserved steps skip the update."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    n, b = t.size, ssm.state_dim
    obs = np.ones(n, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    s2 = _noise_var(noise)
    h = ssm.H[0]
    Phi, Q = discretize_many(ssm, np.diff(t))
    means = np.zeros((n, b))
    covs = np.zeros((n, b, b))
    pm = np.zeros((n, b))
    pP = np.zeros((n, b, b))
    ll = np.zeros(n)
    m = np.zeros(b)
    P = ssm.Pinf.copy()
    for k in range(n):
        if k > 0:
            A = Phi[k - 1]
            m = A @ m
            P = A @ P @ A.T + Q[k - 1]
            P = 0.5 * (P + P.T)
        pm[k], pP[k] = m, P
        if obs[k]:
            Ph = P @ h
            S = h @ Ph + s2
            if not S > 0:
                raise np.linalg.LinAlgError(f"innovation variance {S} <= 0 at step {k}")
            v = y[k] - h @ m
            K = Ph / S
            m = m + K * v
            P = P - np.outer(K, Ph)
            P = 0.5 * (P + P.T)
            ll[k] = -0.5 * (LOG_2PI + math.log(S) + v * v / S)
        means[k], covs[k] = m, P
    Phis = np.concatenate([np.eye(b)[None], Phi]) if n > 1 else np.eye(b)[None]
    return KalmanResult(means, covs, pm, pP, ll, Phis)


def kf_mll(data, kernel, noise=1.0, theta=None) -> float:
    """Prediction-error decomposition of the MLL."""
    return kf_filter(data.times, data.values, _ssm(kernel, theta), noise).mll


def kf_mll_and_gradient(data, kernel, noise=1.0, theta=None):
    """MLL and d MLL / d log(theta) by forward sensitivity recursions."""
    ssm = _ssm(kernel, theta)
    t, y = data.times, data.values
    n, b, p = t.size, ssm.state_dim, ssm.n_params
    s2 = _noise_var(noise)
    h = ssm.H[0]
    Phi, Q, dPhi, dQ = discretize_many(ssm, np.diff(t), grad=True)
    # parameter axis: kernel params then the noise variance
    m = np.zeros(b)
    P = ssm.Pinf.copy()
    dm = np.zeros((p + 1, b))
    dP = np.zeros((p + 1, b, b))
    dP[:p] = ssm.dPinf
    ds = np.zeros(p + 1)
    ds[p] = 1.0
    mll = 0.0
    g = np.zeros(p + 1)
    for k in range(n):
        if k > 0:
            A, dA = Phi[k - 1], dPhi[:, k - 1]
            dm_new = A @ dm.T
            dm_new = dm_new.T
            dm_new[:p] += dA @ m
            APA = dA @ P @ A.T
            dP = A @ dP @ A.T
            dP[:p] += APA + np.swapaxes(APA, -1, -2) + dQ[:, k - 1]
            dm = dm_new
            m = A @ m
            P = A @ P @ A.T + Q[k - 1]
        Ph = P @ h
        S = h @ Ph + s2
        v = y[k] - h @ m
        K = Ph / S
        dPh = dP @ h
        dS = dPh @ h + ds
        dv = -(dm @ h)
        dK = (dPh - np.outer(dS, K)) / S
        mll += -0.5 * (LOG_2PI + math.log(S) + v * v / S)
        g += -0.5 * (dS / S + 2.0 * v * dv / S - v * v * dS / S**2)
        dm = dm + dK * v + np.outer(dv, K)
        # P+ = P - K S K^T
        KKt = np.einsum("pi,j->pij", dK, K) * S
        dP = dP - KKt - np.swapaxes(KKt, -1, -2) - dS[:, None, None] * np.outer(K, K)
        m = m + K * v
        P = P - S * np.outer(K, K)
        P = 0.5 * (P + P.T)
    g[:p] *= ssm.params
    g[p] *= s2
    return float(mll), g


def kf_rts_predict(data, kernel, noise=1.0, test_times=(), include_noise=False, theta=None):
    """Smoothed posterior at ``test_times`` via filter + RTS on the merged grid.

    Test points are inserted as missing observations, after any training point
    at the same time, so coincident times are handled by zero-length steps.
    """
    ssm = _ssm(kernel, theta)
    s = np.asarray(test_times, dtype=float).ravel()
    t = data.times
    allt = np.concatenate([t, s])
    is_test = np.concatenate([np.zeros(t.size, bool), np.ones(s.size, bool)])
    order = np.lexsort((is_test, allt))
    grid = allt[order]
    obs = ~is_test[order]
    yv = np.zeros(grid.size)
    yv[obs] = data.values
    kf = kf_filter(grid, yv, ssm, noise, observed=obs)
    ms, Ps = rts_smooth(kf)
    h = ssm.H[0]
    pos = np.empty(order.size, dtype=int)
    pos[order] = np.arange(order.size)
    tp = pos[t.size :]
    mean = ms[tp] @ h
    var = np.einsum("i,nij,j->n", h, Ps[tp], h)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + _noise_var(noise)
    return mean, var


def rts_smooth(kf: KalmanResult):
    n = kf.means.shape[0]
    ms = kf.means.copy()
    Ps = kf.covs.copy()
    for k in range(n - 2, -1, -1):
        A = kf.Phi[k + 1]
        Pp = kf.pred_covs[k + 1]
        # G = P_k A^T Pp^{-1}
        G = sla.solve(Pp, A @ kf.covs[k], assume_a="pos").T
        ms[k] = kf.means[k] + G @ (ms[k + 1] - kf.pred_means[k + 1])
        Pk = kf.covs[k] + G @ (Ps[k + 1] - Pp) @ G.T
        Ps[k] = 0.5 * (Pk + Pk.T)
    return ms, Ps
