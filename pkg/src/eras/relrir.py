"""Relative-RIR channel mapping: time-domain Wiener filtering and STFT-domain FCP.

FCP conventions, shared by the numpy path and the differentiable path:

* stacked frames ``S~[f, t, k] = S[t - k_past + k, f]`` (oldest first, zero
  outside the signal), ``K = k_past + 1 + k_future``;
* per frequency the filter solves ``(A + eps tr(A)/K I) g = b`` with
  ``A = sum_t S~ S~^H / lam`` and ``b = sum_t S~ conj(X) / lam``;
* the mapped bin is ``g^H S~ = sum_k conj(g_k) S~_k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

from . import autograd as ag
from .signal import Spectrogram, Waveform


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class FcpConfig:
    k_past: int = 19
    k_future: int = 1
    lambda_floor_coeff: float = 1e-4
    regularizer_eps: float = 1e-10

    def __post_init__(self):
        if self.k_past < 0 or self.k_future < 0:
            raise MappingError("k_past and k_future must be non-negative")

    @property
    def taps(self) -> int:
        return self.k_past + 1 + self.k_future


@dataclass(frozen=True)
class WienerConfig:
    # 64 look-ahead taps = 8 ms at 8 kHz, the same look-ahead as one future FCP frame
    filter_length: int = 512
    anticausal_taps: int = 64
    regularizer_eps: float = 1e-10

    def __post_init__(self):
        if self.filter_length < 1:
            raise MappingError("filter_length must be >= 1")
        if not 0 <= self.anticausal_taps < self.filter_length:
            raise MappingError("anticausal_taps must lie in [0, filter_length)")


def _bins(x) -> np.ndarray:
    return x.bins if isinstance(x, Spectrogram) else np.asarray(x, dtype=np.complex128)


def _samples(x) -> np.ndarray:
    return x.mono if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def compute_lambda(mixture_specs, floor_coeff: float = 1e-4) -> np.ndarray:
    """Mean power over microphones plus ``floor_coeff`` times its maximum. [T, F]"""
    bins = [_bins(s) for s in mixture_specs]
    if len({b.shape for b in bins}) != 1:
        raise MappingError("all mixture spectrograms must share one shape")
    power = np.mean([np.abs(b) ** 2 for b in bins], axis=0)
    peak = power.max()
    if not peak > 0:
        raise MappingError("degenerate λ: all mixtures are identically zero")
    return power + floor_coeff * peak


def stack_frames(x: np.ndarray, k_past: int, k_future: int) -> np.ndarray:
    """[T, F] -> [F, T, K] in the tap order documented above."""
    return ag._stack(np.ascontiguousarray(x.T), k_past, k_future)


def regularise(A: np.ndarray, eps: float) -> np.ndarray:
    """A + eps tr(A)/n I on a batch of square matrices."""
    n = A.shape[-1]
    rho = eps * np.real(np.trace(A, axis1=-2, axis2=-1)) / n
    return A + rho[..., None, None] * np.eye(n)


def solve_pd(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a batch of Hermitian systems, positive definite ones directly.

    Matrices that fail a Cholesky test fall back to an eigendecomposition
    pseudo-inverse.
    """
    try:
        np.linalg.cholesky(A)
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[-1]
    out = np.zeros(b.shape, dtype=np.result_type(A, b))
    for i in range(A.shape[0]):
        try:
            out[i] = scipy.linalg.cho_solve(scipy.linalg.cho_factor(A[i], lower=True), b[i])
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(A[i])
            keep = w > max(w.max(), 0.0) * n * np.finfo(float).eps
            inv = np.zeros_like(w)
            inv[keep] = 1.0 / w[keep]
            out[i] = V @ (inv[:, None] * (V.conj().T @ b[i]))
    return out


def hermitian_solve(A: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    """Solve a batch of regularised Hermitian systems (A[i] + eps tr(A[i])/n I) x = b[i]."""
    if b.ndim == A.ndim - 1:
        return solve_pd(regularise(A, eps), b[..., None])[..., 0]
    return solve_pd(regularise(A, eps), b)


def _check_inputs(S_est, X, lam):
    if S_est.shape != X.shape or lam.shape != X.shape:
        raise MappingError(f"shape mismatch: est {S_est.shape}, target {X.shape}, λ {lam.shape}")
    if not (np.all(np.isfinite(S_est)) and np.all(np.isfinite(X)) and np.all(np.isfinite(lam))):
        raise MappingError("non-finite input to FCP")
    if np.any(lam <= 0):
        raise MappingError("λ must be strictly positive")


def _normal_equations(M: np.ndarray, X: np.ndarray, w: np.ndarray):
    # M [F, T, K], X [T, F], w [F, T] -> (M^H W M [F, K, K], M^H W X [F, K, 1], W M)
    WM = M * w[:, :, None]
    MH = np.ascontiguousarray(np.conj(np.swapaxes(M, 1, 2)))
    return MH @ WM, MH @ (w * X.T)[:, :, None], WM


def fcp_filters(est, target_mix, lam: np.ndarray, cfg: FcpConfig = FcpConfig()) -> np.ndarray:
    """Per-frequency weighted LS filters, [F, K] complex."""
    S_est, X = _bins(est), _bins(target_mix)
    lam = np.asarray(lam, dtype=np.float64)
    _check_inputs(S_est, X, lam)
    M = stack_frames(S_est, cfg.k_past, cfg.k_future)
    P, c, _ = _normal_equations(M, X, 1.0 / lam.T)
    # P = conj(A) and c = conj(b), so the solution is conj(g)
    return np.conj(hermitian_solve(P, c, cfg.regularizer_eps)[:, :, 0])


def apply_fcp(est, filters: np.ndarray, cfg: FcpConfig) -> np.ndarray:
    S = stack_frames(_bins(est), cfg.k_past, cfg.k_future)
    return (S @ filters.conj()[:, :, None])[:, :, 0].T


def fcp_map(est, target_mix, lam: np.ndarray, cfg: FcpConfig = FcpConfig()):
    """Map ``est`` (at the reference channel) onto ``target_mix``'s channel.

    Returns ``(mapped, filters)``; ``mapped`` is a Spectrogram when ``est`` is one.
    """
    g = fcp_filters(est, target_mix, lam, cfg)
    mapped = apply_fcp(est, g, cfg)
    if isinstance(est, Spectrogram):
        mapped = est.with_bins(mapped)
    return mapped, g


def fcp_residual(est, target_mix, lam, filters, cfg: FcpConfig) -> float:
    """Weighted residual sum_t,f |X - g^H S~|^2 / lam for the given filters."""
    err = _bins(target_mix) - apply_fcp(est, filters, cfg)
    return float(np.sum(np.abs(err) ** 2 / lam))


# --------------------------------------------------------------------------
# differentiable FCP


def fcp_map_tensor(est_re, est_im, target_mix, lam: np.ndarray, cfg: FcpConfig = FcpConfig(),
                   detach_filters: bool = False, filters: np.ndarray | None = None):
    """Differentiable FCP on a (real, imag) pair of [T, F] tensors.

    ``target_mix`` and ``lam`` are constants. Gradients flow through the filter
    application and, unless ``detach_filters``, through the normal-equation
    solve as well. Passing ``filters`` ([F, K] complex) skips estimation and
    applies them as constants. Returns the mapped (real, imag) pair, [T, F] each.

    The whole map is one fused tape node; ``fcp_map_tensor_composed`` builds
    the same function from elementary primitives.
    """
    est_re, est_im = ag.as_tensor(est_re), ag.as_tensor(est_im)
    X = _bins(target_mix)
    lam = np.asarray(lam, dtype=np.float64)
    E = est_re.data + 1j * est_im.data
    _check_inputs(E, X, lam)
    kp, kf, K = cfg.k_past, cfg.k_future, cfg.taps
    M = stack_frames(E, kp, kf)  # [F, T, K]
    if filters is not None:
        h = np.conj(filters)[:, :, None]
        detach_filters = True
    else:
        w = 1.0 / lam.T
        P, c, WM = _normal_equations(M, X, w)
        P = regularise(P, cfg.regularizer_eps)
        h = solve_pd(P, c)  # conj(g), [F, K, 1]
    y = (M @ h)[:, :, 0].T  # [T, F]

    def bw(g):
        Gy = (g[0] + 1j * g[1]).T[:, :, None]  # [F, T, 1]
        hH = np.conj(np.swapaxes(h, 1, 2))
        if detach_filters:
            GM = Gy * hH
        else:
            # adjoint of y = M h with h = P^-1 c, P = M^H W M + rho I, c = M^H W X:
            # GM = (Gy - W M Gc) h^H + (W X - W M h) Gc^H - 2 eps/K Re(h^H Gc) W M
            Gc = solve_pd(P, np.conj(np.swapaxes(M, 1, 2)) @ Gy)  # P is Hermitian
            left = np.concatenate([Gy - WM @ Gc, w[:, :, None] * X.T[:, :, None] - WM @ h], axis=2)
            right = np.concatenate([hH, np.conj(np.swapaxes(Gc, 1, 2))], axis=1)
            GM = left @ right
            tr = np.real(hH @ Gc)[:, 0, 0]
            GM -= (2.0 * cfg.regularizer_eps / K) * tr[:, None, None] * WM
        GE = ag._unstack(GM, kp, kf).T
        return np.real(GE), np.imag(GE)

    out = ag.custom(np.stack([y.real, y.imag]), (est_re, est_im), bw, "fcp_map")
    return out[0], out[1]


def fcp_map_tensor_composed(est_re, est_im, target_mix, lam: np.ndarray, cfg: FcpConfig = FcpConfig(),
                            detach_filters: bool = False, filters: np.ndarray | None = None):
    """Reference implementation of ``fcp_map_tensor`` from elementary primitives.

    The complex normal equations are embedded as a real 2K x 2K system and
    differentiated through ``ag.solve``.
    """
    X = _bins(target_mix)
    n_frames, n_freq = X.shape
    K = cfg.taps
    w = (1.0 / np.asarray(lam, dtype=np.float64)).T  # [F, T]
    Sr = ag.stack_frames(ag.transpose(est_re), cfg.k_past, cfg.k_future)  # [F, T, K]
    Si = ag.stack_frames(ag.transpose(est_im), cfg.k_past, cfg.k_future)
    if filters is not None:
        g_re = ag.Tensor(filters.real[:, :, None])
        g_im = ag.Tensor(filters.imag[:, :, None])
        return _apply_pair(Sr, Si, g_re, g_im, n_freq, n_frames)
    wk = np.repeat(w[:, :, None], K, axis=2)
    Swr, Swi = Sr * wk, Si * wk
    SwrT, SwiT = ag.transpose(Swr, (0, 2, 1)), ag.transpose(Swi, (0, 2, 1))
    # A[k, j] = sum_t w S_k conj(S_j)
    A_re = SwrT @ Sr + SwiT @ Si
    A_im = SwiT @ Sr - SwrT @ Si
    # b[k] = sum_t w S_k conj(X)
    Xr, Xi = X.real.T[:, :, None], X.imag.T[:, :, None]  # [F, T, 1]
    b_re = SwrT @ ag.Tensor(Xr) + SwiT @ ag.Tensor(Xi)
    b_im = SwiT @ ag.Tensor(Xr) - SwrT @ ag.Tensor(Xi)
    eye = np.broadcast_to(np.eye(K), (n_freq, K, K)).copy()
    trace = ag.tsum(ag.tsum(A_re * eye, axis=2), axis=1)  # [F]
    reg = ag.broadcast_to(ag.reshape(trace * (cfg.regularizer_eps / K), (n_freq, 1, 1)), (n_freq, K, K)) * eye
    A_re = A_re + reg
    top = ag.concat([A_re, -A_im], axis=2)
    bottom = ag.concat([A_im, A_re], axis=2)
    big = ag.concat([top, bottom], axis=1)  # [F, 2K, 2K]
    rhs = ag.concat([b_re, b_im], axis=1)  # [F, 2K, 1]
    g = ag.solve(big, rhs)
    if detach_filters:
        g = g.detach()
    return _apply_pair(Sr, Si, g[:, :K, :], g[:, K:, :], n_freq, n_frames)


def _apply_pair(Sr, Si, g_re, g_im, n_freq, n_frames):
    # conj(g)^T S~ : re = Sr gr + Si gi, im = Si gr - Sr gi
    out_re = Sr @ g_re + Si @ g_im
    out_im = Si @ g_re - Sr @ g_im
    out_re = ag.transpose(ag.reshape(out_re, (n_freq, n_frames)))
    out_im = ag.transpose(ag.reshape(out_im, (n_freq, n_frames)))
    return out_re, out_im


# --------------------------------------------------------------------------
# Wiener


def _shifted_gram(e: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Exact Gram matrix R[i, j] = sum_{0<=l<L} e[l - s_i] e[l - s_j] (zero outside).

    The first row comes from FFT correlation; the rest follows from
    R[i+1, j+1] = R[i, j] - y_i[L-1] y_j[L-1] + y_i[-1] y_j[-1] along diagonals,
    where consecutive shifts differ by one.
    """
    L = e.shape[0]
    n = shifts.shape[0]

    def at(idx):
        idx = np.asarray(idx)
        ok = (idx >= 0) & (idx < L)
        return np.where(ok, e[np.clip(idx, 0, L - 1)], 0.0)

    s0 = shifts[0]
    y0 = at(np.arange(L) - s0)
    corr = fftconvolve(y0, e[::-1])  # corr[L-1+s] = sum_l y0[l] e[l-s]
    first = corr[L - 1 + shifts]
    R = np.zeros((n, n))
    q = np.arange(n - 1)[:, None]
    d = np.arange(n)[None, :]
    sq = shifts[0] + q
    delta = -at(L - 1 - sq) * at(L - 1 - sq - d) + at(-1 - sq) * at(-1 - sq - d)
    acc = np.vstack([np.zeros((1, n)), np.cumsum(delta, axis=0)])  # acc[i, d]
    i = np.arange(n)[:, None]
    j = i + d
    valid = j < n
    R[i.repeat(n, 1)[valid], j[valid]] = (first[None, :] + acc)[valid]
    upper = np.triu(R)
    return upper + np.triu(R, 1).T


def wiener_filter(est, target_mix, cfg: WienerConfig = WienerConfig()) -> np.ndarray:
    e, x = _samples(est), _samples(target_mix)
    if e.shape != x.shape:
        raise MappingError(f"length mismatch: est {e.shape}, target {x.shape}")
    if isinstance(est, Waveform) and isinstance(target_mix, Waveform) and est.sample_rate != target_mix.sample_rate:
        raise MappingError("sample rate mismatch")
    if not np.any(e):
        raise MappingError("cannot filter silence to a nonzero target")
    L = e.shape[0]
    shifts = np.arange(cfg.filter_length) - cfg.anticausal_taps
    R = _shifted_gram(e, shifts)
    corr = fftconvolve(x, e[::-1])
    r = corr[L - 1 + shifts]
    return hermitian_solve(R[None], r[None], cfg.regularizer_eps)[0].real


def apply_wiener(est, w: np.ndarray, cfg: WienerConfig) -> np.ndarray:
    e = _samples(est)
    full = fftconvolve(e, w)
    return full[cfg.anticausal_taps : cfg.anticausal_taps + e.shape[0]]


def wiener_map(est, target_mix, cfg: WienerConfig = WienerConfig()):
    """Time-domain LS filter mapping ``est`` onto ``target_mix``; returns ``(mapped, filter)``."""
    w = wiener_filter(est, target_mix, cfg)
    mapped = apply_wiener(est, w, cfg)
    if isinstance(est, Waveform):
        mapped = Waveform(mapped, est.sample_rate)
    return mapped, w


def map_sources(ests, mixtures, target_m: int, method: str = "fcp", cfg=None, lam: np.ndarray | None = None) -> list:
    """Map each estimate independently onto mixture ``target_m``.

    For ``fcp`` the inputs are spectrograms (λ from all ``mixtures`` unless
    given); for ``wiener`` they are waveforms or 1-D arrays.
    """
    if method == "fcp":
        cfg = cfg or FcpConfig()
        if lam is None:
            lam = compute_lambda(mixtures, cfg.lambda_floor_coeff)
        return [fcp_map(s, mixtures[target_m], lam, cfg)[0] for s in ests]
    if method == "wiener":
        cfg = cfg or WienerConfig()
        return [wiener_map(s, mixtures[target_m], cfg)[0] for s in ests]
    raise MappingError(f"unknown mapping method {method!r}")
