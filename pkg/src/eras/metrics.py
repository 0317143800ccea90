"""Separation metrics, FCP-aligned evaluation, and the oracle report generators."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .relrir import FcpConfig, WienerConfig, compute_lambda, fcp_map, wiener_map
from .signal import Spectrogram, StftConfig, Waveform, istft, stft

CAP_DB = 60.0


class MetricError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.mono
    return np.asarray(x, dtype=np.float64)


def _ratio_db(signal_energy: float, noise_energy: float) -> float:
    if noise_energy <= 0:
        return CAP_DB
    if signal_energy <= 0:
        return -CAP_DB
    return float(np.clip(10 * np.log10(signal_energy / noise_energy), -CAP_DB, CAP_DB))


def si_snr(ref, est) -> float:
    """Scale-invariant SNR in dB, clipped to +-60 dB. No mean removal."""
    r, e = _arr(ref), _arr(est)
    if r.shape != e.shape:
        raise MetricError(f"length mismatch: {r.shape} vs {e.shape}")
    rr = float(r @ r)
    if rr <= 0:
        raise MetricError("reference is all zeros")
    target = (e @ r) / rr * r
    return _ratio_db(float(target @ target), float(np.sum((e - target) ** 2)))


def sdr_filtered(ref, est, taps: int = 512) -> float:
    """SDR allowing a causal ``taps``-long FIR distortion of the reference."""
    r, e = _arr(ref), _arr(est)
    if r.shape != e.shape:
        raise MetricError(f"length mismatch: {r.shape} vs {e.shape}")
    if not np.any(r):
        raise MetricError("reference is all zeros")
    if taps == 1:
        return si_snr(r, e)
    proj, _ = wiener_map(r, e, WienerConfig(taps, 0, regularizer_eps=0.0))
    return _ratio_db(float(proj @ proj), float(np.sum((e - proj) ** 2)))


@dataclass
class EvalResult:
    si_snr: list
    sdr: list
    permutation: tuple
    aligned: list = field(default_factory=list, repr=False)

    @property
    def mean_si_snr(self) -> float:
        return float(np.mean(self.si_snr))

    @property
    def mean_sdr(self) -> float:
        return float(np.mean(self.sdr))


def aligned_eval(refs, ests, mixtures, stft_cfg: StftConfig = StftConfig(), fcp_cfg: FcpConfig = FcpConfig(),
                 sdr_taps: int = 512, with_sdr: bool = True) -> EvalResult:
    """Evaluate estimates after FCP-mapping each onto the reference source image.

    ``refs`` are N source images at the reference channel, ``ests`` are N
    separated signals (waveforms or spectrograms) and ``mixtures`` all M
    mixture waveforms (used for λ). The permutation maximising the mean SI-SNR
    is chosen; ``permutation[n]`` is the estimate matched to reference ``n``.
    """
    refs = [_arr(r) for r in refs]
    n_src = len(refs)
    if len(ests) != n_src:
        raise MetricError(f"{len(ests)} estimates for {n_src} references")
    length = refs[0].shape[0]
    ref_specs = [stft(r, stft_cfg) for r in refs]
    est_specs = [e if isinstance(e, Spectrogram) else stft(_arr(e), stft_cfg) for e in ests]
    lam = compute_lambda([stft(_arr(m), stft_cfg) for m in mixtures], fcp_cfg.lambda_floor_coeff)
    scores, aligned = {}, {}
    for n, j in itertools.product(range(n_src), range(n_src)):
        mapped, _ = fcp_map(est_specs[j], ref_specs[n], lam, fcp_cfg)
        y = istft(mapped.bins, stft_cfg, length)
        aligned[n, j] = y
        scores[n, j] = si_snr(refs[n], y)
    best = max(itertools.permutations(range(n_src)), key=lambda p: np.mean([scores[n, p[n]] for n in range(n_src)]))
    si = [scores[n, best[n]] for n in range(n_src)]
    ys = [aligned[n, best[n]] for n in range(n_src)]
    sdr = [sdr_filtered(refs[n], ys[n], sdr_taps) for n in range(n_src)] if with_sdr else [float("nan")] * n_src
    return EvalResult(si, sdr, tuple(best), ys)


# --------------------------------------------------------------------------
# oracle tables

ORACLE_ROWS = ("mixture", "source_images", "direct_early", "dry")
ORACLE_LABELS = {
    "mixture": "Mixture",
    "source_images": "Source-image signals",
    "direct_early": "Direct-path + early reflections",
    "dry": "Dry sources",
}


def _oracle_inputs(scene, row: str, ref: int) -> list:
    if row == "mixture":
        return [scene.mixtures[ref].mono]
    if row == "source_images":
        return [scene.images[n][ref].mono for n in range(scene.n_sources)]
    if row == "direct_early":
        return [scene.early[n][ref].mono for n in range(scene.n_sources)]
    if row == "dry":
        return [scene.dry[n].mono for n in range(scene.n_sources)]
    raise MetricError(f"unknown oracle row {row!r}")


def reconstruct_mixture(inputs, scene, ref: int, target: int, method: str, stft_cfg: StftConfig = StftConfig(),
                        fcp_cfg: FcpConfig = FcpConfig(), wiener_cfg: WienerConfig = WienerConfig()) -> np.ndarray:
    """Map each input to ``target`` and sum."""
    x = scene.mixtures[target].mono
    if method == "wiener":
        return sum(wiener_map(s, x, wiener_cfg)[0] for s in inputs)
    if method == "fcp":
        specs = [stft(m.mono, stft_cfg) for m in scene.mixtures]
        lam = compute_lambda(specs, fcp_cfg.lambda_floor_coeff)
        total = sum(fcp_map(stft(s, stft_cfg).bins, specs[target].bins, lam, fcp_cfg)[0] for s in inputs)
        return istft(total, stft_cfg, x.shape[0])
    raise MetricError(f"unknown method {method!r}")


@dataclass
class TableReport:
    title: str
    rows: list
    columns: list
    values: np.ndarray  # [rows, columns] scene means
    per_scene: np.ndarray  # [scenes, rows, columns]
    checks: list = field(default_factory=list)  # (name, passed)
    note: str = "SI-SNR values clipped to +-60 dB"

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.checks)

    def value(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.columns.index(col)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *self.columns])
        for i, r in enumerate(self.rows):
            w.writerow([r, *[f"{v:.6f}" for v in self.values[i]]])
        return buf.getvalue()

    def to_text(self, labels: dict | None = None, fmt: str = "{:8.2f}") -> str:
        labels = labels or {}
        width = max(len(labels.get(r, r)) for r in self.rows) + 2
        lines = [self.title, "-" * (width + 10 * len(self.columns))]
        lines.append(" " * width + "".join(f"{c:>10}" for c in self.columns))
        for i, r in enumerate(self.rows):
            lines.append(f"{labels.get(r, r):<{width}}" + "".join(f"{fmt.format(v):>10}" for v in self.values[i]))
        lines.append("-" * (width + 10 * len(self.columns)))
        for name, ok in self.checks:
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}")
        lines.append(f"({self.per_scene.shape[0]} scenes; {self.note})")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "title": self.title,
            "rows": self.rows,
            "columns": self.columns,
            "values": self.values.tolist(),
            "per_scene": self.per_scene.tolist(),
            "checks": [{"name": n, "passed": bool(ok)} for n, ok in self.checks],
        }


def oracle_table(scenes, methods=("wiener", "fcp"), stft_cfg: StftConfig = StftConfig(), fcp_cfg: FcpConfig = FcpConfig(),
                 wiener_cfg: WienerConfig = WienerConfig(), directions=((0, 1), (1, 0))) -> TableReport:
    """SI-SNR of reconstructing a mixture at one channel from signals at the other.

    Each scene value averages both directions.
    """
    scenes = list(scenes)
    if not scenes:
        raise MetricError("no scenes")
    per = np.zeros((len(scenes), len(ORACLE_ROWS), len(methods)))
    for s, scene in enumerate(scenes):
        for i, row in enumerate(ORACLE_ROWS):
            for j, method in enumerate(methods):
                vals = []
                for ref, target in directions:
                    rec = reconstruct_mixture(_oracle_inputs(scene, row, ref), scene, ref, target, method,
                                              stft_cfg, fcp_cfg, wiener_cfg)
                    vals.append(si_snr(scene.mixtures[target].mono, rec))
                per[s, i, j] = np.mean(vals)
    values = per.mean(axis=0)
    report = TableReport("SI-SNR [dB] of mixture reconstruction at the opposite channel", list(ORACLE_ROWS),
                         list(methods), values, per)
    for j, method in enumerate(methods):
        col = values[:, j]
        report.checks.append((f"{method}: strictly increasing down the column", bool(np.all(np.diff(col) > 0))))
        report.checks.append((f"{method}: source images >= mixture + 3 dB", bool(col[1] - col[0] >= 3.0)))
    if "fcp" in methods and "wiener" in methods:
        report.checks.append(("fcp mixture row < wiener mixture row",
                              report.value("mixture", "fcp") < report.value("mixture", "wiener")))
    return report


ISMS_ROWS = ("mixture_mixture", "mixture_zero", "zero_zero", "source_images", "freq_permuted")
ISMS_LABELS = {
    "mixture_mixture": "Mixture, mixture",
    "mixture_zero": "Mixture, zero signal",
    "zero_zero": "Zero signal, zero signal",
    "source_images": "Source-image signals",
    "freq_permuted": "Freq. permuted clean signals",
}
ISMS_EXPECTED = {"mixture_mixture": 1.0, "mixture_zero": 0.5, "zero_zero": 0.0}


def frequency_permute(a: np.ndarray, b: np.ndarray, rng: np.random.Generator):
    """Swap the bins of two [T, F] spectrograms on a random half of the frequencies."""
    n_freq = a.shape[1]
    swap = np.zeros(n_freq, dtype=bool)
    swap[rng.choice(n_freq, n_freq // 2, replace=False)] = True
    return np.where(swap, b, a), np.where(swap, a, b)


def isms_values(scene, channel: int, rng: np.random.Generator, stft_cfg: StftConfig = StftConfig()) -> dict:
    X = stft(scene.mixtures[channel].mono, stft_cfg).bins
    zero = np.zeros_like(X)
    imgs = [stft(scene.images[n][channel].mono, stft_cfg).bins for n in range(scene.n_sources)]
    perm = frequency_permute(imgs[0], imgs[1], rng)
    rows = {
        "mixture_mixture": [X, X],
        "mixture_zero": [X, zero],
        "zero_zero": [zero, zero],
        "source_images": imgs,
        "freq_permuted": list(perm),
    }
    return {k: losses.isms_loss(v, X).item() for k, v in rows.items()}


def isms_table(scenes, seed: int = 0, stft_cfg: StftConfig = StftConfig(), channels=(0, 1)) -> TableReport:
    scenes = list(scenes)
    if not scenes:
        raise MetricError("no scenes")
    rng = np.random.default_rng(seed)
    per = np.zeros((len(scenes), len(ISMS_ROWS), 1))
    for s, scene in enumerate(scenes):
        vals = [isms_values(scene, c, rng, stft_cfg) for c in channels]
        per[s, :, 0] = [np.mean([v[r] for v in vals]) for r in ISMS_ROWS]
    values = per.mean(axis=0)
    report = TableReport("Oracle ISMS loss value", list(ISMS_ROWS), ["ISMS"], values, per,
                         note=f"mean over channels {', '.join(map(str, channels))}")
    for row, expected in ISMS_EXPECTED.items():
        got = per[:, ISMS_ROWS.index(row), 0]
        report.checks.append((f"{ISMS_LABELS[row]} = {expected:.2f} (all scenes, 1e-6)", bool(np.all(np.abs(got - expected) <= 1e-6))))
    img, fp = per[:, 3, 0], per[:, 4, 0]
    frac = float(np.mean(fp > img))
    report.checks.append((f"source images > 0 and < freq-permuted (mean)", bool(values[3, 0] > 0 and values[3, 0] < values[4, 0])))
    report.checks.append((f"freq-permuted > source images in >= 95% of scenes ({100 * frac:.0f}%)", frac >= 0.95))
    return report
