import math
import time

import numpy as np
import pytest
import scipy.linalg as sla

from spingp import (
    Dataset,
    EQApprox,
    Matern12,
    Matern32,
    Matern52,
    Sum,
    add_observation_term,
    assemble_prior_precision,
    btd,
    dense_gp_mll,
    dense_gp_predict,
    generate_sinusoid_data,
    kernel_eval,
    kf_mll,
    kf_rts_predict,
    log_marginal_likelihood,
    merge_grid,
    mll_and_gradient,
    mll_gradient,
    predict,
)
from spingp import engine
from spingp.errors import DuplicateTimestamps, NegativeVariance, NotPositiveDefinite, SingularProcessNoise
from spingp.kernels import discretize


def toy(n, seed=0, spacing="random"):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.1, 1.0, n)) if spacing == "random" else np.arange(n, dtype=float)
    return Dataset(t, np.sin(0.7 * t) + 0.3 * rng.standard_normal(n))


def test_single_block_is_pinf_inverse():
    k = Matern32(1.5, 0.8)
    pr = assemble_prior_precision([3.0], k, jitter=0.0)
    assert pr.matrix.n_blocks == 1
    np.testing.assert_allclose(pr.matrix.diag[0], np.linalg.inv(k.state_space().Pinf), rtol=1e-12)


def test_matern12_precision_inverts_gram():
    t = np.array([0.0, 0.4, 1.5])
    k = Matern12(1.2, 0.9)
    P = assemble_prior_precision(t, k, jitter=0.0).matrix.to_dense()
    K = kernel_eval(k, t[:, None], t[None, :])
    np.testing.assert_allclose(P @ K, np.eye(3), atol=1e-8)


def test_matern32_precision_literal_construction():
    t = np.array([0.0, 0.3, 1.1, 1.6])
    k = Matern32(1.0, 0.7)
    s = k.state_space()
    b, n = 2, 4
    Ainv = np.eye(n * b)
    Qs = [s.Pinf]
    for i in range(1, n):
        d = discretize(s, t[i] - t[i - 1])
        Ainv[i * b : (i + 1) * b, (i - 1) * b : i * b] = -d.Phi
        Qs.append(d.Q)
    ref = Ainv.T @ sla.block_diag(*[np.linalg.inv(Q) for Q in Qs]) @ Ainv
    got = assemble_prior_precision(t, k, jitter=0.0).matrix.to_dense()
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10 * np.abs(ref).max())


def test_observation_term():
    t = np.arange(5.0)
    k = Matern32(1.0, 2.0)
    pr = assemble_prior_precision(t, k)
    s = k.state_space()
    same = add_observation_term(pr.matrix, s, 0.3, np.zeros(5, bool))
    np.testing.assert_array_equal(same.diag, pr.matrix.diag)
    mask = np.array([1, 0, 1, 1, 0], bool)
    got = add_observation_term(pr.matrix, s, 0.3, mask).to_dense()
    G = np.kron(np.diag(mask.astype(float)), s.H)
    np.testing.assert_allclose(got, pr.matrix.to_dense() + G.T @ G / 0.3, rtol=1e-12, atol=1e-12)
    k1 = Matern12(1.0, 1.0)
    pr1 = assemble_prior_precision(t, k1)
    obs = add_observation_term(pr1.matrix, k1.state_space(), 0.25, np.ones(5, bool))
    np.testing.assert_allclose(obs.diag - pr1.matrix.diag, 4.0, rtol=1e-14)


def test_mll_single_point():
    for y in (0.3, -1.7):
        d = Dataset([2.0], [y])
        v = 1.4 + 0.2
        ref = -0.5 * y * y / v - 0.5 * math.log(2 * math.pi * v)
        assert log_marginal_likelihood(d, Matern12(1.4, 0.5), None, 0.2) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("kernel", [Matern32(1.0, 1.3), Matern12(0.7, 2.0), Matern52(1.2, 0.9)], ids=lambda k: k.name)
def test_mll_matches_oracles(kernel, backend):
    d = toy(100)
    mll = log_marginal_likelihood(d, kernel, None, 0.09, backend=backend)
    assert mll == pytest.approx(dense_gp_mll(d, kernel, None, 0.09), rel=1e-8)
    assert mll == pytest.approx(kf_mll(d, kernel, 0.09), rel=1e-8)


def test_mll_kf_n500():
    d = toy(500, 3)
    k = Matern32(1.0, 1.3)
    assert log_marginal_likelihood(d, k, None, 0.09) == pytest.approx(kf_mll(d, k, 0.09), rel=1e-7)


def test_theta_argument():
    d = toy(30)
    k = Matern32(1.0, 1.0)
    assert log_marginal_likelihood(d, k, [2.0, 0.5], 0.1) == log_marginal_likelihood(d, Matern32(2.0, 0.5), None, 0.1)


def test_gradient_stationary_single_point():
    s2n = 0.3
    y = math.sqrt(2.0 + s2n)
    g = mll_gradient(Dataset([0.0], [y]), Matern32(2.0, 1.0), None, s2n)
    assert abs(g[0]) < 1e-10


def _fd_check(d, kernel, s2, rtol=1e-4, **kw):
    x = np.append(kernel.params(), s2)
    _, g = mll_and_gradient(d, kernel, None, s2, **kw)
    z = np.log(x)
    for i in range(x.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += 1e-6
        zm[i] -= 1e-6
        fp = log_marginal_likelihood(d, kernel.with_params(np.exp(zp[:-1])), None, np.exp(zp[-1]), **kw)
        fm = log_marginal_likelihood(d, kernel.with_params(np.exp(zm[:-1])), None, np.exp(zm[-1]), **kw)
        fd = (fp - fm) / 2e-6
        assert abs(g[i] - fd) <= rtol * max(abs(fd), 1e-3), (i, g[i], fd)


def test_gradient_fd_matern32(backend):
    _fd_check(toy(50, 1), Matern32(1.3, 0.8), 0.05, backend=backend)


def test_gradient_fd_sum():
    _fd_check(toy(50, 2), Sum((Matern32(1.0, 2.0), Matern12(0.4, 0.5))), 0.05)


def test_gradient_matches_dense():
    from spingp import dense_gp_mll_and_gradient

    d = toy(40, 4)
    k = Sum((Matern32(1.0, 2.0), Matern52(0.5, 0.7)))
    m1, g1 = mll_and_gradient(d, k, None, 0.1)
    m2, g2 = dense_gp_mll_and_gradient(d, k, None, 0.1)
    assert m1 == pytest.approx(m2, rel=1e-7)
    np.testing.assert_allclose(g1, g2, rtol=1e-5, atol=1e-7)


def test_threads_paths_agree():
    d = toy(300, 5)
    k = Sum((Matern32(1.0, 2.0), Matern12(0.4, 0.5)))
    m1, g1 = mll_and_gradient(d, k, None, 0.1)
    m2, g2 = mll_and_gradient(d, k, None, 0.1, threads=3)
    assert m1 == m2
    np.testing.assert_allclose(g1, g2, rtol=1e-12)
    assert log_marginal_likelihood(d, k, None, 0.1, threads=3) == pytest.approx(m1, rel=1e-10)


def test_interpolation_limit():
    d = toy(20, 6)
    ps = predict(d, Matern32(1.0, 1.0), None, 1e-16, d.times[[3, 11]], jitter=0.0)
    np.testing.assert_allclose(ps.mean, d.values[[3, 11]], atol=1e-4)
    assert np.all(ps.variance < 1e-6)


@pytest.mark.parametrize("kernel", [Matern32(1.0, 1.3), Sum((Matern32(1.0, 2.0), Matern12(0.4, 0.5)))], ids=["m32", "sum"])
def test_predict_matches_oracles(kernel, backend):
    d = toy(30, 7)
    rng = np.random.default_rng(1)
    s = np.sort(rng.uniform(d.times[0] - 2, d.times[-1] + 2, 10))
    s[2] = d.times[5]  # one test point exactly on a training time
    for inc in (False, True):
        ps = predict(d, kernel, None, 0.05, s, include_noise=inc, backend=backend)
        dn = dense_gp_predict(d, kernel, None, 0.05, s, include_noise=inc)
        km, kv = kf_rts_predict(d, kernel, 0.05, s, include_noise=inc)
        np.testing.assert_allclose(ps.mean, dn.mean, atol=1e-6)
        np.testing.assert_allclose(ps.variance, dn.variance, atol=1e-6)
        np.testing.assert_allclose(ps.mean, km, atol=1e-6)
        np.testing.assert_allclose(ps.variance, kv, atol=1e-6)


def test_predict_reports_mll_and_gradient():
    d = toy(30, 8)
    k = Matern32(1.0, 1.3)
    ps = predict(d, k, None, 0.05, [0.5, 100.0])
    m, g = mll_and_gradient(d, k, None, 0.05)
    assert ps.mll == pytest.approx(m, rel=1e-10)
    np.testing.assert_allclose(ps.mll_grad, g, rtol=1e-8, atol=1e-10)
    assert ps.param_names[-1] == "noise.variance"


def test_far_variance_bounded_by_prior():
    d = toy(30, 9)
    k = Matern32(1.7, 0.5)
    far = d.times[-1] + 10 * 0.5 + np.array([0.1, 3.0, 50.0])
    for inc in (False, True):
        ps = predict(d, k, None, 0.2, far, include_noise=inc)
        assert np.all(ps.variance >= 0)
        assert np.all(ps.variance <= 1.7 + 0.2 * inc + 1e-6)


def test_mask_invariance():
    d = toy(25, 10)
    k = Matern52(1.0, 1.5)
    extra = np.sort(np.random.default_rng(2).uniform(d.times[0], d.times[-1], 15))
    a = predict(d, k, None, 0.1, d.times)
    b = predict(d, k, None, 0.1, np.concatenate([extra, d.times]))
    np.testing.assert_allclose(b.mean[15:], a.mean, atol=1e-10)
    np.testing.assert_allclose(b.variance[15:], a.variance, atol=1e-10)
    # unobserved blocks enter the MLL only through their jitter
    assert a.mll == pytest.approx(b.mll, rel=1e-7)


def test_translation_invariance():
    d = toy(80, 11)
    k = Sum((Matern32(1.0, 2.0), Matern12(0.4, 0.5)))
    base = log_marginal_likelihood(d, k, None, 0.1)
    for c in (-30.0, 12.5, 1000.0):
        assert abs(log_marginal_likelihood(d.shifted(c), k, None, 0.1) - base) <= 1e-10 * abs(base)


def test_merge_grid():
    grid, mask, tp, sp = merge_grid([0.0, 1.0, 2.0], [1.0, 1.0 + 1e-12, 0.5, 3.0, 0.5])
    np.testing.assert_array_equal(grid, [0.0, 0.5, 1.0, 2.0, 3.0])
    np.testing.assert_array_equal(mask, [1, 0, 1, 1, 0])
    np.testing.assert_array_equal(tp, [0, 2, 3])
    np.testing.assert_array_equal(sp, [2, 2, 1, 4, 1])


def test_duplicate_timestamps():
    with pytest.raises(DuplicateTimestamps):
        Dataset([0.0, 1.0, 1.0, 2.0], [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(DuplicateTimestamps):
        assemble_prior_precision([0.0, 0.0], Matern12(1.0, 1.0))
    with pytest.raises(ValueError):
        Dataset([1.0, 0.0], [1.0, 2.0])


@pytest.mark.parametrize(
    "kernel,noise",
    [(Matern32(1.0, 1e-300), 0.1), (Matern12(1.0, 1e-310), 0.1), (EQApprox(1e308, 1e-300, 10), 0.1), (Matern32(1e308, 1.0), 1e-3)],
    ids=["m32-tiny-len", "m12-subnormal-len", "eq-overflow", "m32-huge-var"],
)
def test_pathological_theta_raises(kernel, noise, backend):
    d = toy(20, 12)
    for fn in (
        lambda: log_marginal_likelihood(d, kernel, None, noise, backend=backend),
        lambda: mll_and_gradient(d, kernel, None, noise, backend=backend),
        lambda: predict(d, kernel, None, noise, [0.5], backend=backend),
    ):
        with pytest.raises(NotPositiveDefinite):
            fn()


def test_singular_process_noise_without_jitter():
    # the order-10 EQ gives numerically indefinite Q over gaps far below its lengthscale
    t = np.array([0.0, 1e-3, 2e-3])
    with pytest.raises(SingularProcessNoise) as exc:
        assemble_prior_precision(t, EQApprox(1.0, 100.0, 10), jitter=0.0)
    assert isinstance(exc.value, NotPositiveDefinite) and exc.value.block >= 1


def test_negative_variance_clamp(monkeypatch):
    d = toy(10, 13)
    real = btd.selective_inverse

    def shifted(delta):
        def fake(f):
            C = real(f)
            return btd.SymBTD(C.diag - delta * np.eye(C.block_dim), C.upper)

        return fake

    s = d.times[[4]]
    k = Matern12(1.0, 1.0)
    base = predict(d, k, None, 0.1, s).variance[0]
    monkeypatch.setattr(btd, "selective_inverse", shifted(base + 5e-11))
    ps = predict(d, k, None, 0.1, s)
    assert ps.variance[0] == 0.0
    monkeypatch.setattr(btd, "selective_inverse", shifted(base + 1e-9))
    with pytest.raises(NegativeVariance):
        predict(d, k, None, 0.1, s)


def test_noise_validation():
    with pytest.raises(ValueError):
        log_marginal_likelihood(toy(5), Matern12(1.0, 1.0), None, 0.0)
    with pytest.raises(ValueError):
        log_marginal_likelihood(toy(5), Matern12(1.0, 1.0), None, -1.0)


def test_mll_linear_in_n():
    k = Sum((Matern32(1.0, 5.0), EQApprox(1.0, 10.0, 10)))
    ts = []
    for n in (4000, 8000):
        d = generate_sinusoid_data(n, 0)
        log_marginal_likelihood(d, k, None, 0.04)
        rep = []
        for _ in range(5):
            t0 = time.perf_counter()
            log_marginal_likelihood(d, k, None, 0.04)
            rep.append(time.perf_counter() - t0)
        ts.append(np.median(rep))
    assert ts[1] / ts[0] <= 2.5, ts


def test_prior_precision_derivatives_fd():
    t = np.array([0.0, 0.4, 1.1, 1.5])
    k = Matern32(1.2, 0.8)
    dP = engine.prior_precision_derivatives(t, k, jitter=0.0)
    x = k.params()
    for i in range(2):
        h = 1e-6 * x[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (
            assemble_prior_precision(t, k.with_params(xp), jitter=0.0).matrix.to_dense()
            - assemble_prior_precision(t, k.with_params(xm), jitter=0.0).matrix.to_dense()
        ) / (2 * h)
        np.testing.assert_allclose(dP[i].to_dense(), fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())
