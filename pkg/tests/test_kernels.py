import math

import numpy as np
import pytest
import scipy.linalg as sla

from spingp import EQApprox, Matern12, Matern32, Matern52, Sum, discretize, discretize_with_grad, eq_approx_ss, kernel_eval, state_space_of
from spingp.kernels import implied_covariance, kernel_eval_grad

LEAVES = [Matern12(1.3, 0.7), Matern32(0.8, 1.5), Matern52(2.0, 0.9), EQApprox(1.1, 2.0, 6)]
ALL = LEAVES + [Sum((Matern32(1.0, 2.0), Matern12(0.5, 0.3))), Sum((Matern32(1.0, 5.0), EQApprox(1.0, 10.0, 10)))]


def test_matern32_state_space():
    ell = 1.7
    s = Matern32(1.0, ell).state_space()
    np.testing.assert_allclose(s.F, [[0, 1], [-3 / ell**2, -2 * math.sqrt(3) / ell]])
    np.testing.assert_allclose(s.H, [[1, 0]])
    np.testing.assert_allclose(s.Pinf, np.diag([1, 3 / ell**2]))
    s2 = Matern32(2.5, ell).state_space()
    np.testing.assert_allclose(s2.Pinf, 2.5 * np.diag([1, 3 / ell**2]))


def test_matern12_state_space():
    s = Matern12(1.0, 0.4).state_space()
    np.testing.assert_allclose(s.F, [[-1 / 0.4]])
    np.testing.assert_allclose(s.H, [[1.0]])
    np.testing.assert_allclose(s.Pinf, [[1.0]])
    tau = np.linspace(0, 3, 20)
    np.testing.assert_allclose(implied_covariance(s, tau), np.exp(-tau / 0.4), rtol=1e-12)


@pytest.mark.parametrize("kernel", LEAVES[:3], ids=lambda k: k.name)
def test_pinf_solves_lyapunov(kernel):
    s = kernel.state_space()
    L = np.zeros_like(s.F)
    L[-1, -1] = 1.0
    R = s.F @ s.Pinf + s.Pinf @ s.F.T
    # only the driven corner may be nonzero
    np.testing.assert_allclose(R - R[-1, -1] * L, 0, atol=1e-12)


def test_sum_block_size():
    k = Sum((Matern32(1.0, 1.0), EQApprox(1.0, 1.0, 10)))
    assert k.state_dim == 12
    s = k.state_space()
    assert s.F.shape == (12, 12)
    assert s.H.shape == (1, 12)
    np.testing.assert_array_equal(s.F[:2, 2:], 0)
    np.testing.assert_array_equal(s.Pinf[:2, 2:], 0)


def test_bad_hyperparameters():
    with pytest.raises(ValueError):
        Matern32(-1.0, 1.0)
    with pytest.raises(ValueError):
        Matern12(1.0, 0.0)
    for order in (3, 0, 1, 18):
        with pytest.raises(ValueError):
            EQApprox(1.0, 1.0, order)
    with pytest.raises(TypeError):
        state_space_of(object())


def test_state_space_of_theta():
    k = Matern32(1.0, 2.0)
    s = state_space_of(k, [3.0, 0.5])
    np.testing.assert_allclose(s.params, [3.0, 0.5])
    with pytest.raises(ValueError):
        state_space_of(k, [1.0, -1.0])


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_discretize_zero_gap(kernel):
    s = kernel.state_space()
    d = discretize(s, 0.0)
    np.testing.assert_array_equal(d.Phi, np.eye(s.state_dim))
    np.testing.assert_array_equal(d.Q, 0)
    g = discretize_with_grad(s, 0.0)
    np.testing.assert_array_equal(g.dPhi, 0)
    np.testing.assert_array_equal(g.dQ, 0)


def _taylor_expm(A, terms=30):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def test_discretize_matches_taylor():
    s = Matern32(1.0, 1.0).state_space()
    d = discretize(s, 0.5)
    np.testing.assert_allclose(d.Phi, _taylor_expm(s.F * 0.5), atol=1e-10)
    np.testing.assert_allclose(d.Phi, sla.expm(s.F * 0.5), atol=1e-12)


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_group_property(kernel, rng):
    s = kernel.state_space()
    for a, b in rng.uniform(0.01, 3.0, size=(50, 2)):
        lhs = discretize(s, a).Phi @ discretize(s, b).Phi
        np.testing.assert_allclose(lhs, discretize(s, a + b).Phi, atol=1e-9)


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_q_symmetric_psd(kernel, rng):
    s = kernel.state_space()
    for dt in np.concatenate([rng.uniform(0.01, 5.0, 10), [1e-3, 20.0]]):
        Q = discretize(s, dt).Q
        np.testing.assert_array_equal(Q, Q.T)
        tr = np.trace(Q)
        assert np.linalg.eigvalsh(Q).min() >= -1e-10 * max(tr, np.abs(Q).max())


def test_magnitude_derivative():
    s = Matern52(2.0, 1.3).state_space()
    g = discretize_with_grad(s, 0.7, "variance")
    np.testing.assert_array_equal(g.dPhi, 0)
    np.testing.assert_allclose(g.dQ, g.Q / 2.0, atol=1e-14)


def test_unknown_hyperparameter():
    s = Matern32(1.0, 1.0).state_space()
    with pytest.raises(KeyError):
        discretize_with_grad(s, 0.3, "period")
    with pytest.raises(KeyError):
        discretize_with_grad(s, 0.3, 5)


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_discretize_grad_finite_difference(kernel):
    dt = 0.3
    x = kernel.params()
    s = kernel.state_space()
    g = discretize_with_grad(s, dt)
    for i in range(x.size):
        h = 1e-6 * x[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        dp, dm = discretize(kernel.with_params(xp).state_space(), dt), discretize(kernel.with_params(xm).state_space(), dt)
        fd_phi = (dp.Phi - dm.Phi) / (2 * h)
        fd_q = (dp.Q - dm.Q) / (2 * h)
        scale_phi = max(np.abs(g.dPhi[i]).max(), 1e-8)
        scale_q = max(np.abs(g.dQ[i]).max(), 1e-8)
        assert np.abs(g.dPhi[i] - fd_phi).max() <= 1e-4 * scale_phi + 1e-9
        assert np.abs(g.dQ[i] - fd_q).max() <= 1e-4 * scale_q + 1e-9


def test_matern32_lengthscale_derivative_tight():
    s = Matern32(1.0, 1.0).state_space()
    g = discretize_with_grad(s, 0.3, "lengthscale")
    h = 1e-6
    dp = discretize(Matern32(1.0, 1.0 + h).state_space(), 0.3)
    dm = discretize(Matern32(1.0, 1.0 - h).state_space(), 0.3)
    np.testing.assert_allclose(g.dPhi, (dp.Phi - dm.Phi) / (2 * h), rtol=1e-5, atol=1e-10)
    np.testing.assert_allclose(g.dQ, (dp.Q - dm.Q) / (2 * h), rtol=1e-5, atol=1e-10)


def test_eq_order_ten():
    s = eq_approx_ss(1.7, 3.0, 10)
    assert s.state_dim == 10
    k0 = (s.H @ s.Pinf @ s.H.T).item()
    assert abs(k0 - 1.7) <= 1e-6 * 1.7


def test_eq_converges():
    tau = np.linspace(0, 5.0, 501)
    errs = []
    for J in (4, 6, 8, 10):
        k = EQApprox(1.0, 1.0, J)
        errs.append(np.abs(kernel_eval(k, tau, 0.0) - k.exact_cov(tau)).max())
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs
    assert errs[-1] <= 0.02


def test_eq_stable():
    for J in range(2, 17, 2):
        assert np.linalg.eigvals(eq_approx_ss(1.0, 1.0, J).F).real.max() < 0


def test_matern32_value():
    k = Matern32(1.0, 1.0)
    assert kernel_eval(k, 0.0, 0.0) == 1.0
    assert abs(kernel_eval(k, 1.0, 0.0) - (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))) < 1e-15
    assert abs(kernel_eval(k, 1.0, 0.0) - 0.48335) < 1e-5


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_kernel_symmetric(kernel, rng):
    t, u = rng.uniform(-5, 5, (2, 30))
    assert np.array_equal(kernel_eval(kernel, t, u), kernel_eval(kernel, u, t))


@pytest.mark.parametrize("kernel", LEAVES[:3], ids=lambda k: k.name)
def test_implied_matches_closed_form(kernel, rng):
    tau = rng.uniform(0, 10 * kernel.lengthscale, 100)
    np.testing.assert_allclose(implied_covariance(kernel.state_space(), tau), kernel.cov(tau), rtol=1e-8, atol=1e-300)


def test_sum_covariance_additive(rng):
    parts = (Matern32(1.0, 2.0), Matern12(0.5, 0.3), EQApprox(0.7, 1.5, 8))
    tau = rng.uniform(0, 6, 40)
    total = implied_covariance(Sum(parts).state_space(), tau)
    each = sum(implied_covariance(p.state_space(), tau) for p in parts)
    np.testing.assert_allclose(total, each, atol=1e-10)


@pytest.mark.parametrize("kernel", ALL, ids=lambda k: type(k).__name__)
def test_kernel_eval_grad(kernel):
    tau = np.linspace(0, 4, 9)
    x = kernel.params()
    g = kernel_eval_grad(kernel, tau, 0.0)
    for i in range(x.size):
        h = 1e-6 * x[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (kernel_eval(kernel.with_params(xp), tau, 0.0) - kernel_eval(kernel.with_params(xm), tau, 0.0)) / (2 * h)
        np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-8)


def test_modal_matches_expm():
    # the order-14 model is past the modal conditioning cutoff and uses expm
    for J in (4, 10, 14):
        s = eq_approx_ss(1.3, 3.0, J)
        u = np.linspace(0, 40, 200)
        ref = np.array([(s.H @ sla.expm(s.F * x) @ s.Pinf @ s.H.T).item() for x in u])
        np.testing.assert_allclose(implied_covariance(s, u), ref, atol=1e-10)
