"""Stationary kernels and their continuous-time state-space forms.

Every kernel maps to a linear time-invariant SDE

    dz/dt = F z + L w(t),    f(t) = H z(t),

with stationary state covariance ``Pinf``. Over a gap ``dt`` the transition
is ``Phi = expm(F dt)`` and the process noise ``Q = Pinf - Phi Pinf Phi^T``.
Hyperparameter derivatives of ``F`` and ``Pinf`` are carried on the model so
that gradients of the discretized quantities can be formed without finite
differences.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import ClassVar, Sequence

import mpmath
import numpy as np
import scipy.linalg as sla

__all__ = [
    "Kernel",
    "Matern12",
    "Matern32",
    "Matern52",
    "EQApprox",
    "Sum",
    "StateSpaceModel",
    "DiscreteStep",
    "state_space_of",
    "discretize",
    "discretize_with_grad",
    "discretize_many",
    "eq_approx_ss",
    "kernel_eval",
    "kernel_eval_grad",
    "implied_covariance",
    "MAX_EQ_ORDER",
]

MAX_EQ_ORDER = 16


@dataclass(frozen=True)
class StateSpaceModel:
    """LTI state-space representation of a kernel.

    ``dF`` and ``dPinf`` have shape ``(p, b, b)`` and hold derivatives with
    respect to the natural (not log) hyperparameters listed in
    ``param_names``. ``H`` is stored as a ``(1, b)`` row.
    """

    F: np.ndarray
    H: np.ndarray
    Pinf: np.ndarray
    param_names: tuple[str, ...]
    params: np.ndarray
    dF: np.ndarray
    dPinf: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def param_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < self.n_params:
                raise KeyError(f"hyperparameter index {name_or_index} out of range")
            return int(name_or_index)
        try:
            return self.param_names.index(name_or_index)
        except ValueError:
            raise KeyError(f"unknown hyperparameter {name_or_index!r}") from None


@dataclass(frozen=True)
class DiscreteStep:
    Phi: np.ndarray
    Q: np.ndarray
    dPhi: np.ndarray | None = None
    dQ: np.ndarray | None = None


class Kernel:
    """Base class for kernel specifications.

    Concrete kernels are frozen dataclasses whose positive hyperparameters are
    plain fields. ``params()``/``with_params()`` expose them as a flat vector
    in a fixed order so optimizers can work on arrays.
    """

    name: ClassVar[str] = "kernel"

    def param_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, values: Sequence[float]) -> "Kernel":
        raise NotImplementedError

    def state_space(self) -> StateSpaceModel:
        raise NotImplementedError

    @property
    def state_dim(self) -> int:
        raise NotImplementedError

    def __add__(self, other: "Kernel") -> "Sum":
        if not isinstance(other, Kernel):
            return NotImplemented
        return Sum((self, other))


def _check_positive(kernel, *names):
    for n in names:
        v = getattr(kernel, n)
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{kernel.name}: {n} must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class _Leaf(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    _names: ClassVar[tuple[str, ...]] = ("variance", "lengthscale")

    def __post_init__(self):
        object.__setattr__(self, "variance", float(self.variance))
        object.__setattr__(self, "lengthscale", float(self.lengthscale))
        _check_positive(self, "variance", "lengthscale")

    def param_names(self):
        return self._names

    def params(self):
        return np.array([self.variance, self.lengthscale])

    def with_params(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (2,):
            raise ValueError(f"{self.name} expects 2 hyperparameters, got shape {values.shape}")
        return replace(self, variance=values[0], lengthscale=values[1])

    def _model(self, F, Pinf_unit, dF_dl, dPinf_unit_dl):
        s2 = self.variance
        b = F.shape[0]
        H = np.zeros((1, b))
        H[0, 0] = 1.0
        dF = np.stack([np.zeros_like(F), dF_dl])
        dP = np.stack([Pinf_unit, s2 * dPinf_unit_dl])
        return StateSpaceModel(F, H, s2 * Pinf_unit, self._names, self.params(), dF, dP)


@dataclass(frozen=True)
class Matern12(_Leaf):
    name: ClassVar[str] = "matern12"

    @property
    def state_dim(self):
        return 1

    def state_space(self):
        ell = np.float64(self.lengthscale)  # extreme values overflow to inf, not OverflowError
        F = np.array([[-1.0 / ell]])
        return self._model(F, np.ones((1, 1)), np.array([[1.0 / ell**2]]), np.zeros((1, 1)))

    def cov(self, tau):
        return self.variance * np.exp(-np.abs(tau) / self.lengthscale)

    def cov_grad(self, tau):
        r = np.abs(tau)
        e = np.exp(-r / self.lengthscale)
        return np.stack([e, self.variance * e * r / self.lengthscale**2])


@dataclass(frozen=True)
class Matern32(_Leaf):
    name: ClassVar[str] = "matern32"

    @property
    def state_dim(self):
        return 2

    def state_space(self):
        ell = np.float64(self.lengthscale)
        lam = np.sqrt(3.0) / ell
        F = np.array([[0.0, 1.0], [-(lam**2), -2.0 * lam]])
        P = np.diag([1.0, lam**2])
        dlam = -lam / ell
        dF = np.array([[0.0, 0.0], [-2.0 * lam * dlam, -2.0 * dlam]])
        dP = np.diag([0.0, 2.0 * lam * dlam])
        return self._model(F, P, dF, dP)

    def cov(self, tau):
        a = math.sqrt(3.0) * np.abs(tau) / self.lengthscale
        return self.variance * (1.0 + a) * np.exp(-a)

    def cov_grad(self, tau):
        a = math.sqrt(3.0) * np.abs(tau) / self.lengthscale
        e = np.exp(-a)
        return np.stack([(1.0 + a) * e, self.variance * a * a * e / self.lengthscale])


@dataclass(frozen=True)
class Matern52(_Leaf):
    name: ClassVar[str] = "matern52"

    @property
    def state_dim(self):
        return 3

    def state_space(self):
        ell = np.float64(self.lengthscale)
        lam = np.sqrt(5.0) / ell
        F = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-(lam**3), -3.0 * lam**2, -3.0 * lam]])
        k = lam**2 / 3.0
        P = np.array([[1.0, 0.0, -k], [0.0, k, 0.0], [-k, 0.0, lam**4]])
        dlam = -lam / ell
        dF = np.zeros((3, 3))
        dF[2] = [-3.0 * lam**2 * dlam, -6.0 * lam * dlam, -3.0 * dlam]
        dk = 2.0 * lam * dlam / 3.0
        dP = np.array([[0.0, 0.0, -dk], [0.0, dk, 0.0], [-dk, 0.0, 4.0 * lam**3 * dlam]])
        return self._model(F, P, dF, dP)

    def cov(self, tau):
        a = math.sqrt(5.0) * np.abs(tau) / self.lengthscale
        return self.variance * (1.0 + a + a * a / 3.0) * np.exp(-a)

    def cov_grad(self, tau):
        a = math.sqrt(5.0) * np.abs(tau) / self.lengthscale
        e = np.exp(-a)
        return np.stack(
            [(1.0 + a + a * a / 3.0) * e, self.variance * a * a * (1.0 + a) * e / (3.0 * self.lengthscale)]
        )


def _lyapunov_mp(F: np.ndarray, w: float, dps: int = 40):
    """Stationary covariance of a companion-form SDE driven through its last state.

    Solves ``F P + P F^T + w e_b e_b^T = 0`` in extended precision. The
    companion generator is badly conditioned, and a double-precision
    Bartels-Stewart solve leaves a residual large enough to make
    ``Pinf - Phi Pinf Phi^T`` indefinite for short gaps.
    """
    b = F.shape[0]
    with mpmath.workdps(dps):
        Fm = mpmath.matrix(F.tolist())
        idx = [(i, j) for i in range(b) for j in range(i, b)]
        pos = {ij: k for k, ij in enumerate(idx)}
        A = mpmath.zeros(len(idx))
        rhs = mpmath.zeros(len(idx), 1)
        for r, (i, j) in enumerate(idx):
            for k in range(b):
                for src, (p, q) in ((Fm[i, k], (k, j)), (Fm[j, k], (i, k))):
                    if src != 0:
                        A[r, pos[(min(p, q), max(p, q))]] += src
            if i == j == b - 1:
                rhs[r] = -w
        x = mpmath.lu_solve(A, rhs)
        P = mpmath.zeros(b)
        for (i, j), k in pos.items():
            P[i, j] = P[j, i] = x[k]
        scale = P[0, 0]
        d = [2.0 ** round(math.log2(float(mpmath.sqrt(P[i, i] / scale)))) for i in range(b)]
        out = np.array([[float(P[i, j] / (scale * d[i] * d[j])) for j in range(b)] for i in range(b)])
    return out, np.array(d)


@functools.lru_cache(maxsize=None)
def _eq_unit_model(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-lengthscale, unit-variance generator and stationary covariance.

    The EQ spectral density is proportional to ``exp(-w^2/2)``; its reciprocal
    is replaced by the Taylor polynomial ``sum_{k<=J} (w^2/2)^k / k!``. With
    ``u = -s^2`` that polynomial has J roots; the stable spectral factor takes
    ``s = -sqrt(u)`` for each. The companion model is rescaled so ``k(0) = 1``
    and balanced by powers of two (exact in floating point) so ``Pinf`` has a
    diagonal of order one.
    """
    J = order
    c = np.array([1.0 / (2.0**k * math.factorial(k)) for k in range(J + 1)])
    coeffs_u = c * (-1.0) ** np.arange(J + 1)  # polynomial in u = s^2
    u = np.roots(coeffs_u[::-1])
    s = -np.sqrt(u.astype(complex))
    if len(s) != J or np.any(s.real >= 0) or not np.all(np.isfinite(s)):
        raise ValueError(f"EQ approximation of order {J} has no stable spectral factor")
    a = np.real(np.poly(s))
    F = np.zeros((J, J))
    F[:-1, 1:] = np.eye(J - 1)
    F[-1, :] = -a[1:][::-1]
    P, d = _lyapunov_mp(F, math.sqrt(2.0 * math.pi) / c[J])
    F = F * d[None, :] / d[:, None]
    if not np.all(np.isfinite(P)) or np.any(np.linalg.eigvals(F).real >= 0) or np.linalg.eigvalsh(P).min() <= 0:
        raise ValueError(f"EQ approximation of order {J} is numerically unusable")
    F.setflags(write=False)
    P.setflags(write=False)
    return F, P


@dataclass(frozen=True)
class EQApprox(_Leaf):
    """Exponentiated-quadratic kernel through an order-``order`` SDE.

    The implied covariance is normalized so ``k(0) = variance`` exactly.
    """

    order: int = 10
    name: ClassVar[str] = "eq"

    def __post_init__(self):
        super().__post_init__()
        if int(self.order) != self.order:
            raise ValueError(f"eq: order must be an integer, got {self.order!r}")
        object.__setattr__(self, "order", int(self.order))
        if self.order < 2 or self.order % 2:
            raise ValueError(f"eq: order must be even and >= 2, got {self.order}")
        if self.order > MAX_EQ_ORDER:
            raise ValueError(f"eq: order {self.order} exceeds the supported maximum {MAX_EQ_ORDER}")

    @property
    def state_dim(self):
        return self.order

    def state_space(self):
        F0, P0 = _eq_unit_model(self.order)
        ell = np.float64(self.lengthscale)
        return self._model(F0 / ell, P0.copy(), -F0 / ell**2, np.zeros_like(P0))

    def exact_cov(self, tau):
        return self.variance * np.exp(-0.5 * (np.asarray(tau) / self.lengthscale) ** 2)


@dataclass(frozen=True)
class Sum(Kernel):
    """Sum of independent kernels; nested sums are flattened."""

    children: tuple[Kernel, ...] = field(default_factory=tuple)
    name: ClassVar[str] = "sum"

    def __post_init__(self):
        flat = []
        for c in self.children:
            if not isinstance(c, Kernel):
                raise TypeError(f"unknown kernel variant {c!r}")
            flat.extend(c.children if isinstance(c, Sum) else [c])
        if len(flat) < 2:
            raise ValueError("Sum needs at least two kernels")
        object.__setattr__(self, "children", tuple(flat))

    @property
    def state_dim(self):
        return sum(c.state_dim for c in self.children)

    def param_names(self):
        return tuple(
            f"{c.name}[{i}].{n}" for i, c in enumerate(self.children) for n in c.param_names()
        )

    def params(self):
        return np.concatenate([c.params() for c in self.children])

    def with_params(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.param_names()),):
            raise ValueError(f"sum expects {len(self.param_names())} hyperparameters, got shape {values.shape}")
        out, k = [], 0
        for c in self.children:
            p = len(c.param_names())
            out.append(c.with_params(values[k : k + p]))
            k += p
        return Sum(tuple(out))

    def state_space(self):
        parts = [c.state_space() for c in self.children]
        b = sum(m.state_dim for m in parts)
        p = sum(m.n_params for m in parts)
        F = sla.block_diag(*[m.F for m in parts])
        P = sla.block_diag(*[m.Pinf for m in parts])
        H = np.concatenate([m.H for m in parts], axis=1)
        dF = np.zeros((p, b, b))
        dP = np.zeros((p, b, b))
        i = k = 0
        for m in parts:
            s = slice(i, i + m.state_dim)
            dF[k : k + m.n_params, s, s] = m.dF
            dP[k : k + m.n_params, s, s] = m.dPinf
            i += m.state_dim
            k += m.n_params
        return StateSpaceModel(F, H, P, self.param_names(), self.params(), dF, dP)


def state_space_of(kernel: Kernel, theta: Sequence[float] | None = None) -> StateSpaceModel:
    """State-space model of ``kernel``, optionally with hyperparameters ``theta``."""
    if not isinstance(kernel, Kernel):
        raise TypeError(f"unknown kernel variant {kernel!r}")
    if theta is not None:
        kernel = kernel.with_params(theta)
    return kernel.state_space()


def eq_approx_ss(sigma2: float, lengthscale: float, order: int = 10) -> StateSpaceModel:
    return EQApprox(sigma2, lengthscale, order).state_space()


def _vanloan_blocks(F, dF, dts):
    """expm of [[F, dF], [0, F]] * dt for every (param, dt) pair.

    Returns ``(Phi, dPhi)`` of shapes ``(m, b, b)`` and ``(p, m, b, b)``.
    """
    p, b = dF.shape[0], F.shape[0]
    m = len(dts)
    big = np.zeros((p, m, 2 * b, 2 * b))
    big[:, :, :b, :b] = F
    big[:, :, b:, b:] = F
    big[:, :, :b, b:] = dF[:, None]
    big *= dts[None, :, None, None]
    E = sla.expm(big.reshape(p * m, 2 * b, 2 * b)).reshape(p, m, 2 * b, 2 * b)
    return E[0, :, :b, :b], E[:, :, :b, b:]


def discretize_many(ssm: StateSpaceModel, dts, grad: bool = False):
    """Vectorized discretization over an array of gaps.

    Returns ``(Phi, Q)`` or, with ``grad=True``, ``(Phi, Q, dPhi, dQ)`` where
    the derivative arrays have a leading hyperparameter axis. Zero gaps give
    exactly ``Phi = I`` and ``Q = 0``.
    """
    dts = np.asarray(dts, dtype=float)
    if np.any(dts < 0) or not np.all(np.isfinite(dts)):
        raise ValueError("time gaps must be finite and nonnegative")
    b, p, m = ssm.state_dim, ssm.n_params, len(dts)
    P = ssm.Pinf
    Phi = np.broadcast_to(np.eye(b), (m, b, b)).copy()
    if grad:
        dPhi = np.zeros((p, m, b, b))
    pos = dts > 0
    if np.any(pos):
        if grad and p:
            Phi[pos], dPhi[:, pos] = _vanloan_blocks(ssm.F, ssm.dF, dts[pos])
        else:
            Phi[pos] = sla.expm(ssm.F[None] * dts[pos, None, None])
    PhiT = np.swapaxes(Phi, -1, -2)
    Q = P - Phi @ P @ PhiT
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    Q[~pos] = 0.0
    if not grad:
        return Phi, Q
    dP = ssm.dPinf[:, None]
    t1 = dPhi @ P @ PhiT
    dQ = dP - t1 - np.swapaxes(t1, -1, -2) - Phi @ dP @ PhiT
    dQ = 0.5 * (dQ + np.swapaxes(dQ, -1, -2))
    dQ[:, ~pos] = 0.0
    return Phi, Q, dPhi, dQ


def discretize(ssm: StateSpaceModel, dt: float) -> DiscreteStep:
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    Phi, Q = discretize_many(ssm, [dt])
    return DiscreteStep(Phi[0], Q[0])


def discretize_with_grad(ssm: StateSpaceModel, dt: float, theta_index=None) -> DiscreteStep:
    """Discretize and differentiate with respect to one or all hyperparameters.

    ``theta_index`` may be a parameter name or position; ``None`` returns
    derivatives for every hyperparameter stacked on the first axis.
    """
    if dt < 0:
        raise ValueError(f"dt must be nonnegative, got {dt}")
    idx = None if theta_index is None else ssm.param_index(theta_index)
    Phi, Q, dPhi, dQ = discretize_many(ssm, [dt], grad=True)
    dPhi, dQ = dPhi[:, 0], dQ[:, 0]
    if idx is not None:
        dPhi, dQ = dPhi[idx], dQ[idx]
    return DiscreteStep(Phi[0], Q[0], dPhi, dQ)


# Above this eigenvector condition number the modal form loses more than
# ~1e-10 relative accuracy and the expm path is used instead.
_MODAL_COND_MAX = 1e6


def _modal(ssm: StateSpaceModel):
    """Eigen-decomposition of F if it is safely diagonalizable, else None."""
    lam, V = np.linalg.eig(ssm.F)
    if np.linalg.cond(V) > _MODAL_COND_MAX:
        return None
    d = np.abs(lam[:, None] - lam[None])
    np.fill_diagonal(d, np.inf)
    if d.min() < 1e-6 * np.abs(lam).max():
        return None
    return lam, V, np.linalg.inv(V)


def implied_covariance(ssm: StateSpaceModel, tau) -> np.ndarray:
    """k(tau) = H expm(F |tau|) Pinf H^T, evaluated over unique lags."""
    tau = np.abs(np.asarray(tau, dtype=float))
    u, inv = np.unique(tau, return_inverse=True)
    h = ssm.H[0]
    md = _modal(ssm)
    if md is not None:
        lam, V, Vi = md
        vals = (np.exp(u[:, None] * lam) @ ((h @ V) * (Vi @ ssm.Pinf @ h))).real
    else:
        E = sla.expm(ssm.F[None] * u[:, None, None])
        vals = np.einsum("i,mij,jk,k->m", h, E, ssm.Pinf, h)
    return vals[inv].reshape(tau.shape)


def _implied_covariance_grad(ssm: StateSpaceModel, tau) -> np.ndarray:
    tau = np.abs(np.asarray(tau, dtype=float))
    u, inv = np.unique(tau, return_inverse=True)
    h = ssm.H[0]
    md = _modal(ssm)
    if md is None:
        E, dE = _vanloan_blocks(ssm.F, ssm.dF, u)
        g = np.einsum("i,pmij,jk,k->pm", h, dE, ssm.Pinf, h)
        g += np.einsum("i,mij,pjk,k->pm", h, E, ssm.dPinf, h)
    else:
        # d expm(F u) = V (G o Gamma(u)) V^-1 with G = V^-1 dF V and Gamma the
        # divided differences of exp(lam u)
        lam, V, Vi = md
        a, c = h @ V, Vi @ ssm.Pinf @ h
        e = np.exp(u[:, None] * lam)
        dl = lam[:, None] - lam[None]
        np.fill_diagonal(dl, 1.0)
        gam = (e[:, :, None] - e[:, None, :]) / dl
        idx = np.arange(lam.size)
        gam[:, idx, idx] = u[:, None] * e
        w = a[:, None] * np.einsum("ij,pjk,kl->pil", Vi, ssm.dF, V) * c
        g = np.einsum("pij,mij->pm", w, gam)
        g += np.einsum("mi,pi->pm", e, a * np.einsum("ij,pjk,k->pi", Vi, ssm.dPinf, h))
        g = g.real
    return g[:, inv].reshape((ssm.n_params,) + tau.shape)


def kernel_eval(kernel: Kernel, t, t2, exact_eq: bool = False):
    """Covariance between ``t`` and ``t2`` (broadcast).

    Matérn kernels use their closed forms. ``EQApprox`` returns the covariance
    implied by its state-space model unless ``exact_eq`` asks for the true EQ.
    """
    tau = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    if isinstance(kernel, Sum):
        return sum(kernel_eval(c, t, t2, exact_eq) for c in kernel.children)
    if isinstance(kernel, EQApprox):
        if exact_eq:
            return kernel.exact_cov(tau)
        return implied_covariance(kernel.state_space(), tau)
    if isinstance(kernel, (Matern12, Matern32, Matern52)):
        return kernel.cov(tau)
    raise TypeError(f"unknown kernel variant {kernel!r}")


def kernel_eval_grad(kernel: Kernel, t, t2) -> np.ndarray:
    """Derivatives of :func:`kernel_eval` w.r.t. the natural hyperparameters.

    Shape is ``(p,) + broadcast(t, t2).shape``.
    """
    tau = np.asarray(t, dtype=float) - np.asarray(t2, dtype=float)
    if isinstance(kernel, Sum):
        return np.concatenate([kernel_eval_grad(c, t, t2) for c in kernel.children])
    if isinstance(kernel, EQApprox):
        return _implied_covariance_grad(kernel.state_space(), tau)
    if isinstance(kernel, (Matern12, Matern32, Matern52)):
        return kernel.cov_grad(tau)
    raise TypeError(f"unknown kernel variant {kernel!r}")
