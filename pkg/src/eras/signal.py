"""STFT / iSTFT engine and waveform containers.

Everything is float64 / complex128 internally. The analysis and synthesis
windows are both a periodic square-root Hann, so their product is a Hann
window and overlap-add normalised by the summed squared window reconstructs
the input exactly.

Padding rule: the signal is reflect-padded by ``window_length // 2`` on both
sides, then zero-padded at the end so that the last frame is complete.
``original_length`` is kept on the spectrogram so the inverse can truncate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # [channels, length]
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise SignalError(f"waveform must be [channels, length] with length > 0, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    def channel(self, c: int) -> "Waveform":
        return Waveform(self.samples[c : c + 1], self.sample_rate)

    @property
    def mono(self) -> np.ndarray:
        if self.channels != 1:
            raise SignalError(f"expected a single-channel waveform, got {self.channels} channels")
        return self.samples[0]


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256
    hop_length: int = 64
    fft_size: int | None = None
    window_kind: str = "sqrt_hann"

    def __post_init__(self):
        if self.fft_size is None:
            object.__setattr__(self, "fft_size", self.window_length)
        if self.window_kind != "sqrt_hann":
            raise SignalError(f"unsupported window kind {self.window_kind!r}")
        if self.hop_length <= 0 or self.window_length % self.hop_length:
            raise SignalError("hop_length must divide window_length")
        if self.fft_size < self.window_length:
            raise SignalError("fft_size must be >= window_length")

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        n = np.arange(self.window_length)
        return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_length))

    def n_frames(self, length: int) -> int:
        return int(np.ceil(length / self.hop_length)) + 1

    @classmethod
    def from_ms(cls, window_ms: float = 32.0, hop_ms: float = 8.0, sample_rate: int = 8000) -> "StftConfig":
        return cls(int(round(window_ms * sample_rate / 1000)), int(round(hop_ms * sample_rate / 1000)))


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray  # [T, F] complex
    config: StftConfig = field(default_factory=StftConfig)
    original_length: int = 0

    def __post_init__(self):
        b = np.asarray(self.bins, dtype=np.complex128)
        if b.ndim != 2 or b.shape[1] != self.config.n_freq:
            raise SignalError(f"spectrogram must be [T, {self.config.n_freq}], got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise SignalError("spectrogram contains non-finite bins")
        object.__setattr__(self, "bins", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape

    def with_bins(self, bins: np.ndarray) -> "Spectrogram":
        return Spectrogram(bins, self.config, self.original_length)


def _as_mono(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.mono
    x = np.asarray(w, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 1:
        raise SignalError(f"expected a single-channel signal, got shape {x.shape}")
    return x


def stft(w, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Single-channel STFT. Accepts a ``Waveform`` or a 1-D array."""
    x = _as_mono(w)
    n_win, hop = cfg.window_length, cfg.hop_length
    if x.shape[0] < n_win:
        raise SignalError(f"input too short: {x.shape[0]} samples < window of {n_win}")
    if not np.all(np.isfinite(x)):
        raise SignalError("input contains non-finite samples")
    length = x.shape[0]
    n_frames = cfg.n_frames(length)
    half = n_win // 2
    padded = np.pad(x, (half, half), mode="reflect")
    total = n_win + (n_frames - 1) * hop
    padded = np.pad(padded, (0, total - padded.shape[0]))
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_win)[::hop]
    bins = np.fft.rfft(frames * cfg.window(), n=cfg.fft_size, axis=-1)
    return Spectrogram(bins, cfg, length)


def istft(spec: Spectrogram | np.ndarray, cfg: StftConfig | None = None, length: int | None = None) -> np.ndarray:
    """Inverse STFT by windowed overlap-add. Returns a 1-D array of ``length`` samples."""
    if isinstance(spec, Spectrogram):
        bins = spec.bins
        cfg = cfg or spec.config
        length = spec.original_length if length is None else length
    else:
        bins = np.asarray(spec)
        if cfg is None or length is None:
            raise SignalError("raw bins need an explicit config and length")
    n_win, hop = cfg.window_length, cfg.hop_length
    n_frames = bins.shape[0]
    if bins.shape[1] != cfg.n_freq:
        raise SignalError(f"spectrogram has {bins.shape[1]} bins, config expects {cfg.n_freq}")
    half = n_win // 2
    total = n_win + (n_frames - 1) * hop
    if length <= 0 or length + half > total:
        raise SignalError(f"length {length} exceeds what {n_frames} frames can represent")
    win = cfg.window()
    frames = np.fft.irfft(bins, n=cfg.fft_size, axis=-1)[:, :n_win] * win
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        out[t * hop : t * hop + n_win] += frames[t]
        norm[t * hop : t * hop + n_win] += win**2
    seg = slice(half, half + length)
    return out[seg] / np.maximum(norm[seg], 1e-12)


def normalize_by_std(w):
    """Divide by the standard deviation; returns ``(normalized, scale)``."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    scale = float(np.std(x))
    if not np.isfinite(scale) or scale <= 0.0:
        raise SignalError("degenerate input: zero variance")
    if isinstance(w, Waveform):
        return Waveform(x / scale, w.sample_rate), scale
    return x / scale, scale
