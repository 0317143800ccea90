import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from eras import autograd as ag
from eras.relrir import (FcpConfig, MappingError, WienerConfig, apply_fcp, compute_lambda, fcp_filters, fcp_map,
                         fcp_map_tensor, fcp_map_tensor_composed, fcp_residual, hermitian_solve, map_sources,
                         stack_frames, wiener_filter, wiener_map)
from eras.signal import stft


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def qr_ridge(D, y, rho):
    """Independent oracle: min |D h - y|^2 + rho |h|^2 via QR of the augmented system."""
    n = D.shape[1]
    A = np.vstack([D, np.sqrt(rho) * np.eye(n)])
    b = np.concatenate([y, np.zeros(n)])
    Q, R = np.linalg.qr(A)
    return scipy.linalg.solve_triangular(R, Q.conj().T @ b)


def fcp_oracle(S, X, lam, cfg):
    """Per-frequency filters g with mapped = sum_k conj(g_k) S~_k, by dense weighted LS."""
    T, F = S.shape
    offs = np.arange(-cfg.k_past, cfg.k_future + 1)
    g = np.zeros((F, cfg.taps), complex)
    for f in range(F):
        D = np.zeros((T, cfg.taps), complex)
        for k, o in enumerate(offs):
            for t in range(T):
                if 0 <= t + o < T:
                    D[t, k] = S[t + o, f]
        sw = 1.0 / np.sqrt(lam[:, f])
        Dw = D * sw[:, None]
        rho = cfg.regularizer_eps * np.real(np.trace(Dw.conj().T @ Dw)) / cfg.taps
        g[f] = np.conj(qr_ridge(Dw, X[:, f] * sw, rho))
    return g


def wiener_oracle(e, x, cfg):
    L = e.shape[0]
    shifts = np.arange(cfg.filter_length) - cfg.anticausal_taps
    D = np.zeros((L, cfg.filter_length))
    for i, s in enumerate(shifts):
        if s >= 0:
            D[s:, i] = e[: L - s]
        else:
            D[: L + s, i] = e[-s:]
    rho = cfg.regularizer_eps * np.trace(D.T @ D) / cfg.filter_length
    return qr_ridge(D, x, rho).real


# --------------------------------------------------------------------------
# lambda


def test_lambda_constant_field():
    X = np.full((5, 3), 2.0 + 0j)
    assert np.allclose(compute_lambda([X]), 4 + 1e-4 * 4)


def test_lambda_single_peak():
    X = np.zeros((4, 4), complex)
    X[1, 2] = 3.0
    lam = compute_lambda([X])
    assert lam[1, 2] == pytest.approx(9 + 9e-4)
    assert np.all(lam[np.arange(4) != 1] == pytest.approx(9e-4))


def test_lambda_two_mics(rng):
    A, B = crandn(rng, 6, 5), crandn(rng, 6, 5)
    mean = (np.abs(A) ** 2 + np.abs(B) ** 2) / 2
    assert np.allclose(compute_lambda([A, B]), mean + 1e-4 * mean.max())


def test_lambda_errors():
    with pytest.raises(MappingError, match="degenerate"):
        compute_lambda([np.zeros((3, 3))])
    with pytest.raises(MappingError):
        compute_lambda([np.ones((3, 3)), np.ones((3, 4))])


# --------------------------------------------------------------------------
# FCP


def test_stacking_order(rng):
    S = crandn(rng, 6, 2)
    M = stack_frames(S, 2, 1)  # [F, T, K], taps t-2, t-1, t, t+1
    assert M.shape == (2, 6, 4)
    assert M[1, 3, 0] == S[1, 1] and M[1, 3, 2] == S[3, 1] and M[1, 3, 3] == S[4, 1]
    assert M[0, 0, 0] == 0 and M[0, 5, 3] == 0


def test_fcp_self_prediction(rng):
    X = crandn(rng, 40, 9)
    cfg = FcpConfig(0, 0)
    mapped, g = fcp_map(X, X, compute_lambda([X]), cfg)
    assert np.allclose(g, 1.0, atol=1e-8)
    assert np.allclose(mapped, X, atol=1e-8)


def test_fcp_one_frame_delay_in_span(rng):
    S = crandn(rng, 50, 9)
    X = np.vstack([np.zeros((1, 9)), S[:-1]])  # target lags the estimate by one frame
    cfg = FcpConfig(1, 0)
    lam = compute_lambda([X, S])
    g = fcp_filters(S, X, lam, cfg)
    res = fcp_residual(S, X, lam, g, cfg)
    assert res / np.sum(np.abs(X) ** 2 / lam) < 1e-8
    assert np.allclose(g, fcp_oracle(S, X, lam, cfg), atol=1e-8)


@pytest.mark.parametrize("k", [(1, 1), (2, 0), (19, 1)])
def test_fcp_matches_qr_oracle(rng, k):
    cfg = FcpConfig(*k)
    S, X = crandn(rng, 120, 6), crandn(rng, 120, 6)
    lam = compute_lambda([X, S])
    g, ref = fcp_filters(S, X, lam, cfg), fcp_oracle(S, X, lam, cfg)
    assert np.linalg.norm(g - ref) / np.linalg.norm(ref) < 1e-8


def test_fcp_stationary_under_tap_perturbation(rng):
    cfg = FcpConfig(1, 1)
    S, X = crandn(rng, 60, 4), crandn(rng, 60, 4)
    lam = compute_lambda([X])
    cfg0 = FcpConfig(1, 1, regularizer_eps=0.0)
    g = fcp_filters(S, X, lam, cfg0)
    base = fcp_residual(S, X, lam, g, cfg)
    for f in range(4):
        for k in range(3):
            for d in (1e-4, -1e-4, 1e-4j, -1e-4j):
                gp = g.copy()
                gp[f, k] += d
                assert fcp_residual(S, X, lam, gp, cfg) >= base


def test_fcp_errors(rng):
    S = crandn(rng, 10, 3)
    with pytest.raises(MappingError):
        fcp_map(S, S[:9], np.ones((10, 3)))
    bad = S.copy()
    bad[0, 0] = np.nan
    with pytest.raises(MappingError):
        fcp_map(bad, S, np.ones((10, 3)))
    with pytest.raises(MappingError):
        fcp_map(S, S, np.zeros((10, 3)))
    with pytest.raises(MappingError):
        FcpConfig(-1, 0)


def test_fcp_singular_system_does_not_crash():
    # zero estimate: A = 0, the regulariser is 0 too, the pseudo-inverse gives g = 0
    X = np.ones((20, 3), complex)
    mapped, g = fcp_map(np.zeros((20, 3)), X, np.ones((20, 3)), FcpConfig(1, 0))
    assert np.all(g == 0) and np.all(mapped == 0)


def test_hermitian_solve_fallback():
    A = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    x = hermitian_solve(A, np.array([[2.0, 0.0]]), 0.0)
    assert np.allclose(x, [[2.0, 0.0]])


@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_fcp_scale_equivariance(seed, c):
    # scaling the estimate scales the filter inversely and leaves the mapping unchanged
    rng = np.random.default_rng(seed)
    S, X = crandn(rng, 30, 3), crandn(rng, 30, 3)
    lam = compute_lambda([X])
    a, _ = fcp_map(S, X, lam, FcpConfig(2, 1))
    b, _ = fcp_map(c * S, X, lam, FcpConfig(2, 1))
    assert np.allclose(a, b, atol=1e-8 * np.abs(a).max())


# --------------------------------------------------------------------------
# differentiable FCP


def tiny(rng, T=20, F=9):
    S, X = crandn(rng, T, F), crandn(rng, T, F)
    return S, X, compute_lambda([X, S])


def test_fused_forward_matches_numpy(rng):
    S, X, lam = tiny(rng)
    cfg = FcpConfig(1, 0)
    re, im = fcp_map_tensor(ag.Tensor(S.real), ag.Tensor(S.imag), X, lam, cfg)
    ref, _ = fcp_map(S, X, lam, cfg)
    assert np.allclose(re.data + 1j * im.data, ref, atol=1e-12)


@pytest.mark.parametrize("detach", [False, True])
def test_fused_gradient_matches_composed(rng, detach):
    S, X, lam = tiny(rng)
    cfg = FcpConfig(1, 1)
    wr, wi = rng.standard_normal(S.shape), rng.standard_normal(S.shape)
    grads = []
    for fn in (fcp_map_tensor, fcp_map_tensor_composed):
        a, b = ag.Tensor(S.real, requires_grad=True), ag.Tensor(S.imag, requires_grad=True)
        re, im = fn(a, b, X, lam, cfg, detach_filters=detach)
        ag.tsum(re * wr + im * wi).backward()
        grads.append((a.grad, b.grad))
    assert np.allclose(grads[0][0], grads[1][0], rtol=1e-8, atol=1e-10)
    assert np.allclose(grads[0][1], grads[1][1], rtol=1e-8, atol=1e-10)


def test_full_gradient_finite_differences(rng):
    S, X, lam = tiny(rng)
    cfg = FcpConfig(1, 0)
    wr, wi = rng.standard_normal(S.shape), rng.standard_normal(S.shape)
    Si = ag.Tensor(S.imag)

    def f(x):
        re, im = fcp_map_tensor(x, Si, X, lam, cfg)
        return ag.tsum(re * wr + im * wi)

    assert ag.grad_check(f, S.real) < 1e-6


def test_detached_gradient_is_fixed_filter_gradient(rng):
    # detached mode differentiates only the filter application, with filters frozen at the current point
    S, X, lam = tiny(rng)
    cfg = FcpConfig(1, 0)
    wr, wi = rng.standard_normal(S.shape), rng.standard_normal(S.shape)
    Si = ag.Tensor(S.imag)
    g0 = fcp_filters(S, X, lam, cfg)

    def fixed(x):
        re, im = fcp_map_tensor(x, Si, X, lam, cfg, filters=g0)
        return ag.tsum(re * wr + im * wi)

    a = ag.Tensor(S.real, requires_grad=True)
    re, im = fcp_map_tensor(a, Si, X, lam, cfg, detach_filters=True)
    ag.tsum(re * wr + im * wi).backward()
    b = ag.Tensor(S.real, requires_grad=True)
    fixed(b).backward()
    assert np.allclose(a.grad, b.grad, rtol=1e-10, atol=1e-12)
    assert ag.grad_check(fixed, S.real) < 1e-6


def test_fixed_filters_forward(rng):
    S, X, lam = tiny(rng)
    cfg = FcpConfig(1, 0)
    g = crandn(rng, 9, 2)
    re, im = fcp_map_tensor(ag.Tensor(S.real), ag.Tensor(S.imag), X, lam, cfg, filters=g)
    assert np.allclose(re.data + 1j * im.data, apply_fcp(S, g, cfg))


# --------------------------------------------------------------------------
# Wiener


def test_wiener_identity():
    x = np.random.default_rng(0).standard_normal(400)
    cfg = WienerConfig(filter_length=1, anticausal_taps=0)
    mapped, w = wiener_map(x, x, cfg)
    assert w == pytest.approx([1.0]) and np.allclose(mapped, x)


def test_wiener_scaled_delay_in_span(rng):
    x = rng.standard_normal(1000)
    x[-3:] = 0.0  # so the delayed copy loses nothing at the end
    e = 0.5 * np.concatenate([np.zeros(3), x[:-3]])
    cfg = WienerConfig(filter_length=8, anticausal_taps=4)
    mapped, w = wiener_map(e, x, cfg)
    assert np.linalg.norm(mapped - x) / np.linalg.norm(x) < 1e-9
    assert np.linalg.norm(w - wiener_oracle(e, x, cfg)) / np.linalg.norm(w) < 1e-8
    assert w[4 - 3] == pytest.approx(2.0, abs=1e-8)  # shift -3 sits at index anticausal - 3


def test_wiener_scalar_closed_form(rng):
    e, x = rng.standard_normal(500), rng.standard_normal(500)
    _, w = wiener_map(e, x, WienerConfig(filter_length=1, anticausal_taps=0, regularizer_eps=0.0))
    assert w[0] == pytest.approx(e @ x / (e @ e), rel=1e-12)


@pytest.mark.parametrize("L, n, a", [(300, 16, 0), (700, 512, 64), (900, 100, 10)])
def test_wiener_matches_qr_oracle(rng, L, n, a):
    e, x = rng.standard_normal(L), rng.standard_normal(L)
    cfg = WienerConfig(n, a)
    w, ref = wiener_filter(e, x, cfg), wiener_oracle(e, x, cfg)
    assert np.linalg.norm(w - ref) / np.linalg.norm(ref) < 1e-8


@pytest.mark.parametrize("d", [1, 5, 11])
def test_wiener_shift_covariance(rng, d):
    e, x = rng.standard_normal(600), rng.standard_normal(600)
    e[-d:] = 0.0
    ed = np.concatenate([np.zeros(d), e[:-d]])
    n = 12
    r0 = np.sum((wiener_map(e, x, WienerConfig(n + d, 0))[0] - x) ** 2)
    r1 = np.sum((wiener_map(ed, x, WienerConfig(n + d, d))[0] - x) ** 2)
    assert r1 == pytest.approx(r0, rel=1e-9)


def test_wiener_errors(rng):
    with pytest.raises(MappingError, match="silence"):
        wiener_map(np.zeros(100), rng.standard_normal(100))
    with pytest.raises(MappingError):
        wiener_map(np.ones(100), np.ones(99))
    with pytest.raises(MappingError):
        WienerConfig(filter_length=0)
    with pytest.raises(MappingError):
        WienerConfig(filter_length=4, anticausal_taps=4)


# --------------------------------------------------------------------------
# map_sources


def test_map_sources_mixture_and_permutation(scenes):
    sc = scenes[0]
    specs = [stft(m.mono) for m in sc.mixtures]
    imgs = [stft(sc.images[n][0].mono) for n in range(2)]
    out = map_sources(imgs, specs, 1, "fcp")
    swapped = map_sources(imgs[::-1], specs, 1, "fcp")
    assert np.allclose(out[0].bins, swapped[1].bins) and np.allclose(out[1].bins, swapped[0].bins)
    X1 = specs[1].bins
    err_imgs = np.linalg.norm(out[0].bins + out[1].bins - X1)
    err_mix = np.linalg.norm(map_sources([specs[0]], specs, 1, "fcp")[0].bins - X1)
    assert err_imgs < err_mix
    (self_map,) = map_sources([specs[1]], specs, 1, "fcp", FcpConfig(0, 0))
    assert np.allclose(self_map.bins, X1, atol=1e-6 * np.abs(X1).max())
    w = map_sources([sc.images[0][0].mono], [m.mono for m in sc.mixtures], 1, "wiener",
                    WienerConfig(filter_length=64, anticausal_taps=8))
    assert w[0].shape == sc.mixtures[1].mono.shape
    with pytest.raises(MappingError):
        map_sources(imgs, specs, 1, "dft")
