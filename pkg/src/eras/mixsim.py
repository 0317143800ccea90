"""Synthetic two-channel, two-speaker reverberant scenes and WAV I/O.

A scene follows the usual convolutive model: each microphone observes the sum
over sources of (RIR * dry source). RIRs are synthetic: a unit direct tap at a
per-microphone delay followed by an exponentially decaying Gaussian tail.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import fftconvolve, butter, sosfilt

from .signal import SignalError, Waveform


class SceneError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


RT60_RANGE = (0.05, 1.0)


@dataclass(frozen=True)
class Rir:
    taps: np.ndarray
    delay_to_direct: int
    sample_rate: int

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 1 or not np.all(np.isfinite(taps)):
            raise SceneError("RIR taps must be a finite 1-D array")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def identity(cls, sample_rate: int = 8000, delay: int = 0) -> "Rir":
        taps = np.zeros(delay + 1)
        taps[delay] = 1.0
        return cls(taps, delay, sample_rate)


def synth_rir(rt60: float, delay: int, length: int, seed, sample_rate: int = 8000,
              shared_seed=None, coherence: float = 0.0) -> Rir:
    """Exponentially decaying noise tail behind a unit direct tap at ``delay``.

    The amplitude envelope is exp(-3 ln10 t / rt60), i.e. energy falls by
    60 dB after ``rt60`` seconds. The tail starts one sample after the direct
    tap and its energy is scaled to a fixed direct-to-reverberant ratio that
    shrinks with rt60.

    With ``shared_seed`` the tail noise is ``sqrt(coherence)`` times a noise
    drawn from ``shared_seed`` plus ``sqrt(1 - coherence)`` times one drawn
    from ``seed``; RIRs of one source at several microphones share
    ``shared_seed`` so their tails are partially coherent.
    """
    if not 0.0 <= coherence <= 1.0:
        raise SceneError(f"coherence={coherence} outside [0, 1]")
    if not (RT60_RANGE[0] <= rt60 <= RT60_RANGE[1]):
        raise SceneError(f"rt60={rt60} outside supported range {RT60_RANGE}")
    if delay < 0 or length <= delay + 1:
        raise SceneError(f"invalid delay/length: delay={delay}, length={length}")
    n_tail = length - delay - 1
    t = np.arange(1, n_tail + 1) / sample_rate
    envelope = np.exp(-3.0 * np.log(10.0) * t / rt60)
    noise = np.random.default_rng(seed).standard_normal(n_tail)
    if shared_seed is not None and coherence > 0:
        common = np.random.default_rng(shared_seed).standard_normal(n_tail)
        noise = np.sqrt(coherence) * common + np.sqrt(1.0 - coherence) * noise
    tail = noise * envelope
    # DRR drops from about +6 dB at rt60=0.05 to about -4 dB at rt60=1.0
    drr_db = 6.0 - 10.0 * (rt60 - RT60_RANGE[0]) / (RT60_RANGE[1] - RT60_RANGE[0])
    tail *= np.sqrt(10 ** (-drr_db / 10) / np.sum(tail**2))
    taps = np.zeros(length)
    taps[delay] = 1.0
    taps[delay + 1 :] = tail
    return Rir(taps, delay, sample_rate)


def measure_rt60(rir: Rir) -> float:
    """Estimate rt60 from a log-linear fit to the squared tail."""
    tail = rir.taps[rir.delay_to_direct + 1 :]
    t = np.arange(1, tail.shape[0] + 1) / rir.sample_rate
    # smooth the noisy squared tail with short blocks before fitting
    block = 32
    n = (tail.shape[0] // block) * block
    energy = (tail[:n] ** 2).reshape(-1, block).mean(axis=1)
    tb = t[:n].reshape(-1, block).mean(axis=1)
    keep = energy > energy[0] * 1e-5
    slope = np.polyfit(tb[keep], np.log(energy[keep]), 1)[0]
    # energy ~ exp(-6 ln10 t / rt60)
    return float(-6.0 * np.log(10.0) / slope)


@dataclass(frozen=True)
class MixtureScene:
    dry: list  # N Waveforms
    rirs: list  # [n][m] Rir
    images: list  # [n][m] Waveform
    direct_path: list  # [n][m] Waveform
    early: list  # [n][m] Waveform
    mixtures: list  # M Waveforms
    seed: int | None = None

    @property
    def n_sources(self) -> int:
        return len(self.dry)

    @property
    def n_channels(self) -> int:
        return len(self.mixtures)

    @property
    def sample_rate(self) -> int:
        return self.mixtures[0].sample_rate

    @property
    def length(self) -> int:
        return self.mixtures[0].length

    def mixture_array(self) -> np.ndarray:
        return np.stack([m.mono for m in self.mixtures])

    def image_array(self) -> np.ndarray:
        """[N, M, L]"""
        return np.array([[w.mono for w in row] for row in self.images])


def _conv(x: np.ndarray, h: np.ndarray, length: int) -> np.ndarray:
    return fftconvolve(x, h)[:length]


def render_scene(dry, rirs, early_window_ms: float = 50.0, seed: int | None = None) -> MixtureScene:
    """Convolve every dry source with every RIR and sum per microphone."""
    rates = {w.sample_rate for w in dry} | {r.sample_rate for row in rirs for r in row}
    if len(rates) != 1:
        raise SceneError(f"mismatched sample rates: {sorted(rates)}")
    sr = rates.pop()
    length = max(w.length for w in dry)
    srcs = [np.pad(w.mono, (0, length - w.length)) for w in dry]
    n_mics = len(rirs[0])
    early_len = int(round(early_window_ms * sr / 1000))
    images, direct, early = [], [], []
    for n, s in enumerate(srcs):
        img_row, dir_row, early_row = [], [], []
        for m in range(n_mics):
            rir = rirs[n][m]
            d = rir.delay_to_direct
            img_row.append(Waveform(_conv(s, rir.taps, length), sr))
            h_direct = np.zeros(d + 1)
            h_direct[d] = rir.taps[d]
            dir_row.append(Waveform(_conv(s, h_direct, length), sr))
            early_row.append(Waveform(_conv(s, rir.taps[: d + early_len + 1], length), sr))
        images.append(img_row)
        direct.append(dir_row)
        early.append(early_row)
    mixtures = [Waveform(sum(images[n][m].mono for n in range(len(srcs))), sr) for m in range(n_mics)]
    return MixtureScene(
        dry=[Waveform(s, sr) for s in srcs],
        rirs=[list(row) for row in rirs],
        images=images,
        direct_path=direct,
        early=early,
        mixtures=mixtures,
        seed=seed,
    )


BURST_S = (0.12, 0.35)  # syllable-like burst durations, seconds
GAP_S = (0.05, 0.3)  # pauses between bursts, seconds


@dataclass(frozen=True)
class SpectralEnvelope:
    """Band limits (Hz) plus formant-like boosts given as (centre, bandwidth) pairs."""

    lo: float
    hi: float
    formants: tuple

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "SpectralEnvelope":
        lo = float(rng.uniform(80.0, 300.0))
        hi = float(rng.uniform(2800.0, 3800.0))
        formants = tuple((float(rng.uniform(300.0, 2500.0)), float(rng.uniform(150.0, 500.0))) for _ in range(2))
        return cls(lo, hi, formants)

    def apply(self, x: np.ndarray, sample_rate: int) -> np.ndarray:
        x = sosfilt(butter(4, [self.lo, self.hi], btype="band", fs=sample_rate, output="sos"), x)
        for fc, bw in self.formants:
            band = [max(fc - bw / 2, 50.0), fc + bw / 2]
            x = x + 1.5 * sosfilt(butter(2, band, btype="band", fs=sample_rate, output="sos"), x)
        return x


def burst_envelope(rng: np.random.Generator, length: int, sample_rate: int = 8000) -> np.ndarray:
    """Syllable-like on/off amplitude envelope with random burst and gap durations."""
    env = np.zeros(length)
    pos = int(rng.integers(0, sample_rate // 10))
    while pos < length:
        dur = int(rng.uniform(*BURST_S) * sample_rate)
        gap = int(rng.uniform(*GAP_S) * sample_rate)
        seg = np.hanning(dur) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(pos + dur, length)
        env[pos:end] = seg[: end - pos]
        pos = end + gap
    return env


def turn_envelopes(rng: np.random.Generator, length: int, n_sources: int, sample_rate: int = 8000,
                   turn_s=(0.25, 0.6), overlap_s=(0.0, 0.1)) -> np.ndarray:
    """Conversation-like activity: sources take turns, adjacent turns overlap briefly. [N, L]"""
    env = np.zeros((n_sources, length))
    pos = int(rng.integers(0, sample_rate // 10))
    who = int(rng.integers(n_sources))
    while pos < length:
        dur = int(rng.uniform(*turn_s) * sample_rate)
        seg = np.hanning(dur) ** 0.5 * rng.uniform(0.5, 1.0)
        end = min(pos + dur, length)
        env[who, pos:end] = np.maximum(env[who, pos:end], seg[: end - pos])
        pos = end - int(rng.uniform(*overlap_s) * sample_rate)
        who = (who + 1) % n_sources
    return env


def speechlike_source(rng: np.random.Generator, length: int, sample_rate: int = 8000, voiced: bool = True,
                      envelope: SpectralEnvelope | None = None, floor_db: float | None = None,
                      activity: np.ndarray | None = None) -> np.ndarray:
    """Band-limited, syllable-modulated bursts.

    ``voiced`` sources are harmonic (a gliding pulse train) and unvoiced ones
    are Gaussian noise. Sources drawn with the same ``envelope`` have nearly
    the same long-term spectrum, so only frame-level structure (harmonicity
    and on/off timing) tells them apart.
    """
    t = np.arange(length) / sample_rate
    if envelope is None:
        envelope = SpectralEnvelope.draw(rng)
    if voiced:
        f0 = rng.uniform(100.0, 200.0) * (1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi)))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        n_harm = int(sample_rate / 2 / 100.0)
        x = np.zeros(length)
        for k in range(1, n_harm + 1):
            fk = k * f0
            x += np.where(fk < 0.48 * sample_rate, np.cos(k * phase), 0.0)
    else:
        x = rng.standard_normal(length)
    x = envelope.apply(x, sample_rate)
    if activity is None:
        activity = burst_envelope(rng, length, sample_rate)
    env = activity
    x = x * env
    x = x / (np.std(x) + 1e-12)
    if floor_db is not None:
        # continuous broadband floor so that no time-frequency bin is empty
        x = x + 10 ** (floor_db / 20) * rng.standard_normal(length)
        x = x / np.std(x)
    return x


@dataclass
class SceneParams:
    n_sources: int = 2
    n_mics: int = 2
    duration: float = 2.0
    sample_rate: int = 8000
    rt60_range: tuple = (0.1, 0.5)
    rir_length: int = 2048
    base_delay: int = 8
    max_mic_delay: int = 3
    early_window_ms: float = 50.0
    snr_db: float | None = None
    tail_coherence: float = 0.0
    source_floor_db: float | None = None
    activity: str = "bursts"  # "bursts": independent syllables, "turns": alternating turns

    def validate(self):
        lo, hi = self.rt60_range
        if not (RT60_RANGE[0] <= lo <= hi <= RT60_RANGE[1]):
            raise SceneError(f"rt60 range {self.rt60_range} outside {RT60_RANGE}")
        if self.n_sources != 2 or self.n_mics != 2:
            raise SceneError("only N=2 sources and M=2 microphones are supported")
        if self.activity not in ("bursts", "turns"):
            raise SceneError(f"unknown activity pattern {self.activity!r}")
        if not 0.0 <= self.tail_coherence <= 1.0:
            raise SceneError(f"tail_coherence={self.tail_coherence} outside [0, 1]")


def make_scene(seed: int, params: SceneParams = SceneParams()) -> MixtureScene:
    """Draw a full random scene from ``seed``."""
    params.validate()
    rng = np.random.default_rng(seed)
    sr = params.sample_rate
    length = int(round(params.duration * sr))
    envelope = SpectralEnvelope.draw(rng)
    turns = turn_envelopes(rng, length, params.n_sources, sr) if params.activity == "turns" else None
    dry = [Waveform(speechlike_source(rng, length, sr, voiced=(n % 2 == 0), envelope=envelope,
                                      floor_db=params.source_floor_db,
                                      activity=None if turns is None else turns[n]), sr)
           for n in range(params.n_sources)]
    rt60 = float(rng.uniform(*params.rt60_range))
    rirs = []
    for n in range(params.n_sources):
        # relative inter-mic delay differs per source (source direction)
        offsets = [0] + [int(rng.integers(-params.max_mic_delay, params.max_mic_delay + 1)) for _ in range(params.n_mics - 1)]
        shared = rng.integers(2**32)
        row = []
        for m in range(params.n_mics):
            delay = params.base_delay + offsets[m]
            row.append(synth_rir(rt60, delay, params.rir_length, rng.integers(2**32), sr, shared, params.tail_coherence))
        rirs.append(row)
    scene = render_scene(dry, rirs, params.early_window_ms, seed=seed)
    if params.snr_db is not None:
        scene = add_sensor_noise(scene, params.snr_db, rng)
    return scene


def add_sensor_noise(scene: MixtureScene, snr_db: float, rng: np.random.Generator) -> MixtureScene:
    """Return a copy whose mixtures carry white noise at ``snr_db``.

    The mixture is then no longer the exact sum of the images.
    """
    mixtures = []
    for w in scene.mixtures:
        x = w.mono
        noise = rng.standard_normal(x.shape[0])
        noise *= np.sqrt(np.mean(x**2) / np.mean(noise**2) / 10 ** (snr_db / 10))
        mixtures.append(Waveform(x + noise, w.sample_rate))
    return MixtureScene(scene.dry, scene.rirs, scene.images, scene.direct_path, scene.early, mixtures, scene.seed)


def make_scenes(seeds, params: SceneParams = SceneParams()) -> list:
    return [make_scene(int(s), params) for s in seeds]


# --------------------------------------------------------------------------
# WAV I/O


def save_wav(path, w: Waveform, format: str = "float32") -> None:
    """Write ``w`` as RIFF/WAVE. pcm16 rounds half away from zero and clips."""
    x = w.samples.T if w.channels > 1 else w.samples[0]
    if format == "float32":
        data = x.astype(np.float32)
    elif format == "pcm16":
        scaled = np.clip(x * 32768.0, -32768.0, 32767.0)
        data = (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).clip(-32768, 32767).astype(np.int16)
    else:
        raise WavFormatError(f"unsupported output format {format!r}")
    wavfile.write(str(path), w.sample_rate, data)


def load_wav(path) -> Waveform:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file (bad 'RIFF' header chunk)")
    try:
        sr, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises ValueError / struct errors on truncated chunks
        raise WavFormatError(f"{path}: cannot parse 'fmt '/'data' chunk: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported 'fmt ' chunk sample type {data.dtype}; need PCM16 or float32")
    x = x.T if x.ndim == 2 else x[None, :]
    if x.shape[0] > 2:
        raise WavFormatError(f"{path}: 'fmt ' chunk declares {x.shape[0]} channels; at most 2 supported")
    if x.shape[1] == 0:
        raise WavFormatError(f"{path}: empty 'data' chunk")
    return Waveform(x, sr)


# --------------------------------------------------------------------------
# Scene directories and manifests


def write_scene(scene: MixtureScene, out_dir, format: str = "float32") -> dict:
    """Write dry/image/early/direct/mixture WAVs; return the manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"mixture": [], "dry": [], "image": [], "early": [], "direct": []}
    for m, w in enumerate(scene.mixtures):
        name = f"mix_ch{m}.wav"
        save_wav(out_dir / name, w, format)
        files["mixture"].append(name)
    for n in range(scene.n_sources):
        name = f"dry_s{n}.wav"
        save_wav(out_dir / name, scene.dry[n], format)
        files["dry"].append(name)
        for key, comp in (("image", scene.images), ("early", scene.early), ("direct", scene.direct_path)):
            row = []
            for m in range(scene.n_channels):
                name = f"{key}_s{n}_ch{m}.wav"
                save_wav(out_dir / name, comp[n][m], format)
                row.append(name)
            files[key].append(row)
    return {
        "dir": out_dir.name,
        "seed": scene.seed,
        "sample_rate": scene.sample_rate,
        "length": scene.length,
        "delays": [[r.delay_to_direct for r in row] for row in scene.rirs],
        "files": files,
    }


def read_scene(entry: dict, root) -> MixtureScene:
    """Load a scene back from a manifest entry; raises naming the scene on missing parts."""
    base = Path(root) / entry["dir"]
    files = entry.get("files", {})
    for key in ("mixture", "dry", "image", "early", "direct"):
        if key not in files or not files[key]:
            raise SceneError(f"scene {entry.get('dir')!r} is missing oracle component {key!r}")
    try:
        mixtures = [load_wav(base / f) for f in files["mixture"]]
        dry = [load_wav(base / f) for f in files["dry"]]
        images = [[load_wav(base / f) for f in row] for row in files["image"]]
        early = [[load_wav(base / f) for f in row] for row in files["early"]]
        direct = [[load_wav(base / f) for f in row] for row in files["direct"]]
    except FileNotFoundError as exc:
        raise SceneError(f"scene {entry.get('dir')!r}: missing file {exc.filename}") from exc
    rirs = [[Rir.identity(mixtures[0].sample_rate, d) for d in row] for row in entry.get("delays", [])]
    return MixtureScene(dry, rirs, images, direct, early, mixtures, entry.get("seed"))


def write_manifest(path, entries: list, params: SceneParams, seed: int) -> None:
    payload = {"version": 1, "seed": seed, "params": asdict(params), "scenes": entries}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_manifest(path) -> tuple[list, dict]:
    """Returns ``(scenes, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"cannot read manifest {path}: {exc}") from exc
    entries = manifest.get("scenes") or []
    if not entries:
        raise SceneError(f"manifest {path} lists no scenes")
    return [read_scene(e, path.parent) for e in entries], manifest
