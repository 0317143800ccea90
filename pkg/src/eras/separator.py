"""Toy per-frame mask network and the unsupervised two-stage training loop.

The network sees one mixture frame at a time (log-magnitude plus scaled
real/imag parts) and emits a complex (real/imag) mask per source and bin. The
masks multiply the mixture spectrogram.

Training follows the directional recipe: every scene contributes both
channels; separated signals from one channel are FCP-mapped onto the other and
scored with RAS (+ beta ISMS) (+ gamma ICC against the stop-gradient
self-mapping of the target channel).
"""
from __future__ import annotations

import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .losses import DirectedTerm, LossReport, LossWeights, eras_loss
from .metrics import aligned_eval
from .mixsim import SceneParams, make_scene
from .relrir import FcpConfig, compute_lambda, fcp_map, fcp_map_tensor
from .signal import Spectrogram, StftConfig, normalize_by_std, stft

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# model


def frame_features(X: np.ndarray) -> np.ndarray:
    """[T, F] complex mixture -> [T, 3F] features: log-magnitude, real, imag."""
    mag = np.abs(X)
    scale = np.sqrt(np.mean(mag**2)) + 1e-12
    return np.concatenate([np.log(mag / scale + 1e-4), X.real / scale, X.imag / scale], axis=1)


@dataclass
class MaskNet:
    n_freq: int
    n_src: int = 2
    hidden: tuple = (128, 128)
    weights: list = field(default_factory=list)  # [W0, b0, W1, b1, ...] as numpy arrays

    @classmethod
    def init(cls, n_freq: int, n_src: int = 2, hidden=(128, 128), seed: int = 0, mask_bias: float | None = None) -> "MaskNet":
        """Uniform +-1/sqrt(fan_in) init; the output real-mask bias starts at ``mask_bias`` (default 1/N)."""
        rng = np.random.default_rng(seed)
        sizes = [3 * n_freq, *hidden, 2 * n_src * n_freq]
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            weights.append(rng.uniform(-bound, bound, (fan_out,)))
        net = cls(n_freq, n_src, tuple(hidden), weights)
        bias = weights[-1]
        for n in range(n_src):
            bias[2 * n * n_freq : (2 * n + 1) * n_freq] += 1.0 / n_src if mask_bias is None else mask_bias
        return net

    @classmethod
    def identity(cls, n_freq: int, n_src: int = 2, hidden=(8,)) -> "MaskNet":
        """All-zero weights and a unit real-mask bias: every output equals the mixture."""
        net = cls.init(n_freq, n_src, hidden, seed=0)
        net.weights = [np.zeros_like(w) for w in net.weights]
        for n in range(n_src):
            net.weights[-1][2 * n * n_freq : (2 * n + 1) * n_freq] = 1.0
        return net

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def copy(self) -> "MaskNet":
        return MaskNet(self.n_freq, self.n_src, self.hidden, [w.copy() for w in self.weights])


def separate(params, net: MaskNet, mix) -> list:
    """Apply the mask network to one mixture spectrogram.

    ``params`` are the tensors standing for ``net.weights`` (leaves with
    ``requires_grad`` when training). Returns N (real, imag) pairs shaped like
    the mixture.
    """
    X = mix.bins if hasattr(mix, "bins") else np.asarray(mix)
    if X.ndim != 2 or X.shape[1] != net.n_freq:
        raise TrainingError(f"mixture has shape {X.shape}; network expects [T, {net.n_freq}]")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite mixture")
    T, F = X.shape
    h = ag.Tensor(frame_features(X))
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        h = h @ W + ag.broadcast_to(ag.reshape(b, (1, b.shape[0])), (T, b.shape[0]))
        if i < n_layers - 1:
            h = ag.relu(h)
    Xr, Xi = ag.Tensor(X.real), ag.Tensor(X.imag)
    outs = []
    for n in range(net.n_src):
        mr = h[:, (2 * n) * F : (2 * n + 1) * F]
        mi = h[:, (2 * n + 1) * F : (2 * n + 2) * F]
        outs.append(ag.cmul(mr, mi, Xr, Xi))
    return outs


def separate_numpy(net: MaskNet, mix) -> list:
    """Inference helper: N complex [T, F] arrays."""
    pairs = separate([ag.Tensor(w) for w in net.weights], net, mix)
    return [r.data + 1j * i.data for r, i in pairs]


# --------------------------------------------------------------------------
# data


@dataclass
class PreparedScene:
    """Per-scene arrays used by training and validation."""

    specs: list  # M complex [T, F], std-normalised mixtures
    lam: np.ndarray
    mixtures: list  # M raw waveforms (1-D)
    images_ref: list  # N source images at channel 0 (1-D)
    seed: int | None = None


def prepare_scene(scene, stft_cfg: StftConfig = StftConfig(), fcp_cfg: FcpConfig = FcpConfig()) -> PreparedScene:
    mixes = [m.mono for m in scene.mixtures]
    specs = [stft(normalize_by_std(x)[0], stft_cfg).bins for x in mixes]
    lam = compute_lambda(specs, fcp_cfg.lambda_floor_coeff)
    images = [scene.images[n][0].mono for n in range(scene.n_sources)] if scene.images else []
    return PreparedScene(specs, lam, mixes, images, scene.seed)


@dataclass
class DatasetConfig:
    n_train: int = 64
    n_val: int = 16
    seed: int = 1000
    scene: SceneParams = field(default_factory=SceneParams)


@dataclass
class Dataset:
    train: list
    val: list
    config: DatasetConfig | None = None


def build_dataset(cfg: DatasetConfig = DatasetConfig(), stft_cfg: StftConfig = StftConfig(),
                  fcp_cfg: FcpConfig = FcpConfig()) -> Dataset:
    seeds = np.arange(cfg.n_train + cfg.n_val) + cfg.seed
    scenes = [prepare_scene(make_scene(int(s), cfg.scene), stft_cfg, fcp_cfg) for s in seeds]
    return Dataset(scenes[: cfg.n_train], scenes[cfg.n_train :], cfg)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros(cls, net: MaskNet) -> "AdamState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(w) for w in net.weights], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.step)


def clip_by_global_norm(grads: list, max_norm: float) -> tuple[list, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def adam_update(net: MaskNet, grads: list, state: AdamState, lr: float, b1=0.9, b2=0.999, eps=1e-8) -> None:
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for w, g, m, v in zip(net.weights, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# loss for one scene


def scene_loss(params, net: MaskNet, scene: PreparedScene, weights: LossWeights, fcp_cfg: FcpConfig = FcpConfig(),
               detach_fcp_filters: bool = False) -> LossReport:
    """ERAS loss of one two-channel scene over both directions.

    Self-mappings (m -> m) used as ICC pseudo-targets are computed with numpy
    on detached values, so they never enter the tape.
    """
    n_mics = len(scene.specs)
    seps = [separate(params, net, scene.specs[m]) for m in range(n_mics)]
    calls = 0
    self_maps = {}
    if weights.gamma > 0:
        for m in range(n_mics):
            self_maps[m] = []
            for r, i in seps[m]:
                mapped, _ = fcp_map(r.data + 1j * i.data, scene.specs[m], scene.lam, fcp_cfg)
                self_maps[m].append(mapped)
                calls += 1
    terms = []
    for ref in range(n_mics):
        for target in range(n_mics):
            if target == ref:
                continue
            mapped = [fcp_map_tensor(r, i, scene.specs[target], scene.lam, fcp_cfg, detach_fcp_filters) for r, i in seps[ref]]
            calls += len(mapped)
            same = None
            if weights.alpha_ref > 0:
                same = [fcp_map_tensor(r, i, scene.specs[ref], scene.lam, fcp_cfg, detach_fcp_filters) for r, i in seps[ref]]
                calls += len(same)
            terms.append(DirectedTerm(ref, target, scene.specs[target], mapped, self_maps.get(target),
                                      scene.specs[ref], same))
    report = eras_loss(terms, weights)
    report.fcp_calls = calls
    if not np.isfinite(report.total):
        bad = [k for k, v in report.components.items() if not np.isfinite(v)]
        raise TrainingError(f"non-finite loss in component(s) {bad}")
    return report


def _leaves(net: MaskNet) -> list:
    return [ag.Tensor(w, requires_grad=True) for w in net.weights]


def loss_and_grads(net: MaskNet, scenes: list, weights: LossWeights, fcp_cfg: FcpConfig = FcpConfig(),
                   detach_fcp_filters: bool = False):
    """Mean loss over ``scenes`` and its gradient w.r.t. every weight."""
    grads = [np.zeros_like(w) for w in net.weights]
    reports = []
    for scene in scenes:
        params = _leaves(net)
        rep = scene_loss(params, net, scene, weights, fcp_cfg, detach_fcp_filters)
        rep.tensor.backward()
        for g, p in zip(grads, params):
            if p.grad is not None:
                g += p.grad / len(scenes)
        reports.append(rep)
    return reports, grads


def train_step(net: MaskNet, scenes: list, weights: LossWeights, state: AdamState, lr: float, grad_clip: float = 1.0,
               fcp_cfg: FcpConfig = FcpConfig(), detach_fcp_filters: bool = False) -> LossReport:
    """One Adam update on a batch of scenes (both channels of each). Updates ``net`` in place."""
    reports, grads = loss_and_grads(net, scenes, weights, fcp_cfg, detach_fcp_filters)
    grads, norm = clip_by_global_norm(grads, grad_clip)
    adam_update(net, grads, state, lr)
    return merge_reports(reports, weights, grad_norm=norm)


def merge_reports(reports: list, weights: LossWeights, grad_norm: float | None = None) -> LossReport:
    keys = reports[0].components.keys()
    comps = {k: float(np.mean([r.components[k] for r in reports])) for k in keys}
    merged = LossReport(float(np.mean([r.total for r in reports])), comps, {}, weights,
                        fcp_calls=sum(r.fcp_calls for r in reports))
    if grad_norm is not None:
        merged.permutations["grad_norm"] = grad_norm
    return merged


# --------------------------------------------------------------------------
# configuration and runs


@dataclass
class StageConfig:
    beta: float = 0.3
    gamma: float = 0.0
    epochs: int = 5
    warmup_steps: int = 0


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=lambda: StageConfig(beta=0.0, gamma=0.1, epochs=3, warmup_steps=16))
    use_stage2: bool = True
    alpha_ref: float = 0.0
    lr: float = 1e-3
    lr_halving_patience: int = 2
    grad_clip: float = 1.0
    batch_size: int = 1
    hidden: tuple = (128, 128)
    seed: int = 0
    detach_fcp_filters: bool = False
    success_threshold_db: float = 3.0
    probation_epochs: int = 5
    fcp: FcpConfig = field(default_factory=FcpConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["data"]["scene"]["rt60_range"] = list(self.data.scene.rt60_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")

        def sub(klass, value):
            value = dict(value or {})
            bad = set(value) - set(klass.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown {klass.__name__} keys: {sorted(bad)}")
            return klass(**value)

        for key, klass in (("stage1", StageConfig), ("stage2", StageConfig), ("fcp", FcpConfig), ("stft", StftConfig)):
            if key in d:
                d[key] = sub(klass, d[key])
        if "data" in d:
            data = dict(d["data"])
            if "scene" in data:
                scene = sub(SceneParams, data["scene"])
                scene.rt60_range = tuple(scene.rt60_range)
                data["scene"] = scene
            d["data"] = sub(DatasetConfig, data)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        cfg = cls(**d)
        for st in (cfg.stage1, cfg.stage2):
            if st.beta < 0 or st.gamma < 0:
                raise ValueError("stage weights must be non-negative")
        return cfg


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    status: str = "unknown"
    best_val_si_snr: float = -math.inf
    best_epoch: int = -1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(net: MaskNet, scenes: list, stft_cfg: StftConfig = StftConfig(), fcp_cfg: FcpConfig = FcpConfig(),
             with_sdr: bool = False, per_source: bool = False) -> dict:
    """Mean FCP-aligned SI-SNR (and optionally SDR) at channel 0 over ``scenes``."""
    si, sdr = [], []
    for scene in scenes:
        length = scene.mixtures[0].shape[0]
        specs = [Spectrogram(e, stft_cfg, length) for e in separate_numpy(net, scene.specs[0])]
        res = aligned_eval(scene.images_ref, specs, scene.mixtures, stft_cfg, fcp_cfg, with_sdr=with_sdr)
        si.extend(res.si_snr)
        sdr.extend(res.sdr)
    out = {"si_snr": float(np.mean(si))}
    if with_sdr:
        out["sdr"] = float(np.mean(sdr))
    if per_source:
        out["per_source_si_snr"] = [float(v) for v in si]
        out["per_source_sdr"] = [float(v) for v in sdr]
    return out


def validation_loss(net: MaskNet, scenes: list, weights: LossWeights, fcp_cfg: FcpConfig) -> float:
    params = [ag.Tensor(w) for w in net.weights]
    return float(np.mean([scene_loss(params, net, s, weights, fcp_cfg).total for s in scenes]))


def write_npz(path, arrays: dict) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


class Trainer:
    """Holds model, optimiser and schedule state; one object per run."""

    def __init__(self, cfg: TrainConfig, n_freq: int | None = None):
        self.cfg = cfg
        n_freq = n_freq or cfg.stft.n_freq
        self.net = MaskNet.init(n_freq, 2, cfg.hidden, seed=cfg.seed)
        self.opt = AdamState.zeros(self.net)
        self.rng = np.random.default_rng(cfg.seed + 7919)
        self.epoch = 0
        self.stage = 1
        self.stage_step = 0
        self.base_lr = cfg.lr
        self.best_val_loss = math.inf
        self.bad_epochs = 0
        self.record = RunRecord(seed=cfg.seed)
        self.best_net = self.net.copy()
        self.traces = []

    @property
    def stage_cfg(self) -> StageConfig:
        return self.cfg.stage1 if self.stage == 1 else self.cfg.stage2

    @property
    def weights(self) -> LossWeights:
        st = self.stage_cfg
        return LossWeights(beta=st.beta, gamma=st.gamma, alpha_ref=self.cfg.alpha_ref)

    def current_lr(self) -> float:
        warm = self.stage_cfg.warmup_steps
        if warm > 0 and self.stage_step < warm:
            return self.base_lr * self.stage_step / warm
        return self.base_lr

    def switch_stage(self) -> None:
        """Move to stage 2: weights and lr schedule change, parameters do not."""
        self.stage = 2
        self.stage_step = 0
        self.base_lr = self.cfg.lr
        self.best_val_loss = math.inf
        self.bad_epochs = 0

    def run_epoch(self, data: Dataset) -> dict:
        order = self.rng.permutation(len(data.train))
        bs = self.cfg.batch_size
        reports = []
        for start in range(0, len(order), bs):
            batch = [data.train[i] for i in order[start : start + bs]]
            lr = self.current_lr()
            rep = train_step(self.net, batch, self.weights, self.opt, lr, self.cfg.grad_clip, self.cfg.fcp,
                             self.cfg.detach_fcp_filters)
            self.traces.append((len(self.traces), rep))
            reports.append(rep)
            self.stage_step += 1
        self.epoch += 1
        val = evaluate(self.net, data.val, self.cfg.stft, self.cfg.fcp)
        vloss = validation_loss(self.net, data.val, self.weights, self.cfg.fcp)
        if vloss < self.best_val_loss - 1e-12:
            self.best_val_loss, self.bad_epochs = vloss, 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.cfg.lr_halving_patience:
                self.base_lr *= 0.5
                self.bad_epochs = 0
        entry = {
            "epoch": self.epoch,
            "stage": self.stage,
            "val_si_snr": val["si_snr"],
            "val_loss": vloss,
            "lr": self.base_lr,
            "train_loss": float(np.mean([r.total for r in reports])),
            "components": merge_reports(reports, self.weights).components,
        }
        self.record.epochs.append(entry)
        if val["si_snr"] > self.record.best_val_si_snr:
            self.record.best_val_si_snr = val["si_snr"]
            self.record.best_epoch = self.epoch
            self.best_net = self.net.copy()
        if self.epoch == self.cfg.probation_epochs:
            self.record.status = "success" if val["si_snr"] >= self.cfg.success_threshold_db else "failure"
        log.info("seed %d epoch %d stage %d: val SI-SNR %.2f dB, val loss %.4f, lr %.2e",
                 self.cfg.seed, self.epoch, self.stage, val["si_snr"], vloss, self.base_lr)
        return entry

    # checkpoints -----------------------------------------------------------

    def save(self, path) -> None:
        arrays = {}
        for i, w in enumerate(self.net.weights):
            arrays[f"w{i}"] = w
            arrays[f"m{i}"] = self.opt.m[i]
            arrays[f"v{i}"] = self.opt.v[i]
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "n_freq": self.net.n_freq,
            "n_weights": len(self.net.weights),
            "opt_step": self.opt.step,
            "epoch": self.epoch,
            "stage": self.stage,
            "stage_step": self.stage_step,
            "base_lr": self.base_lr,
            "best_val_loss": self.best_val_loss,
            "bad_epochs": self.bad_epochs,
            "rng": self.rng.bit_generator.state,
            "record": self.record.to_dict(),
        }
        write_npz(path, {"meta": np.array(json.dumps(meta, sort_keys=True)), **arrays})

    @classmethod
    def load(cls, path) -> "Trainer":
        try:
            with np.load(path, allow_pickle=False) as z:
                meta = json.loads(str(z["meta"]))
                arrays = {k: z[k] for k in z.files if k != "meta"}
        except Exception as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        version = meta.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint {path} has version {version!r}; this build reads version {CHECKPOINT_VERSION}")
        cfg = TrainConfig.from_dict(meta["config"])
        tr = cls(cfg, meta["n_freq"])
        n = meta["n_weights"]
        try:
            tr.net.weights = [arrays[f"w{i}"].copy() for i in range(n)]
            tr.opt = AdamState([arrays[f"m{i}"].copy() for i in range(n)], [arrays[f"v{i}"].copy() for i in range(n)],
                               meta["opt_step"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint {path} is missing array {exc}") from exc
        tr.epoch, tr.stage, tr.stage_step = meta["epoch"], meta["stage"], meta["stage_step"]
        tr.base_lr, tr.best_val_loss, tr.bad_epochs = meta["base_lr"], meta["best_val_loss"], meta["bad_epochs"]
        tr.rng.bit_generator.state = meta["rng"]
        rec = meta["record"]
        tr.record = RunRecord(rec["epochs"], rec["status"], rec["best_val_si_snr"], rec["best_epoch"], rec["seed"])
        tr.best_net = tr.net.copy()
        return tr


def run_two_stage(cfg: TrainConfig, data: Dataset, checkpoint_dir=None) -> tuple[RunRecord, Trainer]:
    """Stage 1 for ``stage1.epochs`` epochs, then (optionally) stage 2 from the same state."""
    tr = Trainer(cfg, data.train[0].specs[0].shape[1])
    for _ in range(cfg.stage1.epochs):
        tr.run_epoch(data)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        tr.save(Path(checkpoint_dir) / "stage1.npz")
    if cfg.use_stage2 and cfg.stage2.epochs > 0:
        tr.switch_stage()
        for _ in range(cfg.stage2.epochs):
            tr.run_epoch(data)
    if checkpoint_dir is not None:
        tr.save(Path(checkpoint_dir) / "last.npz")
        best = Trainer.load(Path(checkpoint_dir) / "last.npz")
        best.net = tr.best_net.copy()
        best.save(Path(checkpoint_dir) / "best.npz")
    return tr.record, tr


def stability_sweep(betas, seeds, data: Dataset, alpha_ref: float = 0.0, base: TrainConfig | None = None) -> dict:
    """Train each (beta, seed) for the probation epochs with gamma = 0 and classify."""
    base = base or TrainConfig()
    if len(seeds) < 2:
        raise ValueError("a sweep needs at least two seeds")
    results = {}
    for beta in betas:
        runs = []
        for seed in seeds:
            cfg = replace(base, seed=int(seed), alpha_ref=alpha_ref, use_stage2=False,
                          stage1=StageConfig(beta=beta, gamma=0.0, epochs=base.probation_epochs))
            rec, _ = run_two_stage(cfg, data)
            runs.append({"seed": int(seed), "status": rec.status, "val_si_snr": rec.epochs[-1]["val_si_snr"]})
        results[(float(beta), float(alpha_ref))] = runs
    return results


def sweep_counts(results: dict) -> dict:
    return {k: (sum(r["status"] == "success" for r in v), sum(r["status"] == "failure" for r in v))
            for k, v in results.items()}


def sweep_table(results: dict) -> str:
    counts = sweep_counts(results)
    betas = sorted({b for b, _ in counts})
    alphas = sorted({a for _, a in counts})
    lines = ["Training successes / failures", "alpha_ref " + "".join(f"{'beta=' + format(b, 'g'):>14}" for b in betas)]
    for a in alphas:
        cells = "".join(f"{f'{counts[(b, a)][0]} / {counts[(b, a)][1]}':>14}" if (b, a) in counts else f"{'-':>14}" for b in betas)
        lines.append(f"{a:<10}" + cells)
    return "\n".join(lines)
