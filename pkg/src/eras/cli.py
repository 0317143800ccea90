"""Command-line entry point: ``eras <command> [flags]``.

Every command resolves its configuration (defaults, then ``--config``, then
explicit flags), writes the result to ``<output_dir>/config.json`` before doing
any work, and can be replayed from that file::

    eras simulate --count 5 --seed 3 -o runs/sim
    eras simulate --config runs/sim/config.json -o runs/sim-replay

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "ERAS_OUTPUT_DIR"
DEFAULT_OUTPUT = "eras_runs"
COMMANDS = ("simulate", "oracle-table", "isms-table", "train", "stability-sweep", "evaluate")
THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("eras")


class CliError(Exception):
    code = 1


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataError(CliError):
    code = EXIT_DATA


class NumericalError(CliError):
    code = EXIT_NUMERIC


# --------------------------------------------------------------------------
# configuration


def _cfg_classes():
    """Command configs are built lazily: their fields reference numpy-backed modules."""
    from .mixsim import SceneParams
    from .relrir import FcpConfig, WienerConfig
    from .separator import TrainConfig
    from .signal import StftConfig

    @dataclasses.dataclass
    class SimulateConfig:
        count: int = 10
        seed: int = 0
        format: str = "float32"
        scene: SceneParams = dataclasses.field(default_factory=SceneParams)

    @dataclasses.dataclass
    class TableConfig:
        manifest: str | None = None  # if unset, ``count`` scenes are drawn from ``seed``
        count: int = 20
        seed: int = 0
        scene: SceneParams = dataclasses.field(default_factory=SceneParams)
        methods: tuple = ("wiener", "fcp")
        stft: StftConfig = dataclasses.field(default_factory=StftConfig)
        fcp: FcpConfig = dataclasses.field(default_factory=FcpConfig)
        wiener: WienerConfig = dataclasses.field(default_factory=WienerConfig)

    @dataclasses.dataclass
    class SweepConfig:
        betas: tuple = (0.0, 0.3)
        seeds: tuple = (0, 1, 2, 3, 4)
        alpha_ref: float = 0.0
        base: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    @dataclasses.dataclass
    class EvaluateConfig:
        checkpoint: str = ""
        manifest: str | None = None
        count: int = 16
        seed: int = 5000
        scene: SceneParams = dataclasses.field(default_factory=SceneParams)
        with_sdr: bool = True
        stft: StftConfig = dataclasses.field(default_factory=StftConfig)
        fcp: FcpConfig = dataclasses.field(default_factory=FcpConfig)

    return {
        "simulate": SimulateConfig,
        "oracle-table": TableConfig,
        "isms-table": TableConfig,
        "train": TrainConfig,
        "stability-sweep": SweepConfig,
        "evaluate": EvaluateConfig,
    }


def from_dict(klass, data: dict, where: str = ""):
    """Build dataclass ``klass`` from nested dicts, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or klass.__name__}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(klass)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or klass.__name__}: {', '.join(unknown)}")
    default = klass()
    kwargs = {}
    for key, value in data.items():
        current = getattr(default, key)
        if dataclasses.is_dataclass(current):
            value = from_dict(type(current), value, f"{where}.{key}" if where else key)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return klass(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or klass.__name__}: {exc}") from exc


def to_dict(cfg) -> dict:
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v

    return clean(dataclasses.asdict(cfg))


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config_file(path: str, command: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "command" in data:
        extra = sorted(set(data) - {"command", "config", "run", "version"})
        if extra:
            raise ConfigError(f"unknown key(s) in snapshot {path}: {', '.join(extra)}")
        if data["command"] != command:
            raise ConfigError(f"snapshot {path} is for {data['command']!r}, not {command!r}")
        data = data.get("config", {})
    return data


def resolve(command: str, args: argparse.Namespace):
    klass = _cfg_classes()[command]
    data = load_config_file(args.config, command) if args.config else {}
    flags = {}
    for dest, dotted in FLAG_PATHS.get(command, {}).items():
        value = getattr(args, dest, None)
        if value is not None:
            set_path(flags, dotted, value)
    if command == "simulate" and getattr(args, "rt60", None) is not None:
        set_path(flags, "scene.rt60_range", list(args.rt60))
    if command in ("oracle-table", "isms-table", "evaluate") and getattr(args, "rt60", None) is not None:
        set_path(flags, "scene.rt60_range", list(args.rt60))
    cfg = from_dict(klass, merge(data, flags))
    validate(command, cfg)
    return cfg


def validate(command: str, cfg) -> None:
    from .mixsim import SceneError

    scene = getattr(cfg, "scene", None)
    if command == "stability-sweep":
        scene = cfg.base.data.scene
    elif command == "train":
        scene = cfg.data.scene
    try:
        if scene is not None:
            scene.validate()
    except SceneError as exc:
        raise ConfigError(str(exc)) from exc
    if command == "simulate":
        if cfg.count < 1:
            raise ConfigError("count must be >= 1")
        if cfg.format not in ("float32", "pcm16"):
            raise ConfigError(f"format must be float32 or pcm16, got {cfg.format!r}")
    if command in ("oracle-table", "isms-table") and cfg.manifest is None and cfg.count < 1:
        raise ConfigError("count must be >= 1")
    if command == "oracle-table":
        bad = [m for m in cfg.methods if m not in ("wiener", "fcp")]
        if bad or not cfg.methods:
            raise ConfigError(f"methods must be drawn from wiener/fcp, got {list(cfg.methods)}")
    if command == "train":
        _check_train(cfg)
    if command == "stability-sweep":
        _check_train(cfg.base)
        if len(cfg.seeds) < 2:
            raise ConfigError("a sweep needs at least two seeds")
        if not cfg.betas or any(b < 0 for b in cfg.betas):
            raise ConfigError("betas must be a non-empty list of non-negative weights")
    if command == "evaluate" and not cfg.checkpoint:
        raise ConfigError("evaluate needs --checkpoint")


def _check_train(cfg) -> None:
    for name, st in (("stage1", cfg.stage1), ("stage2", cfg.stage2)):
        if st.beta < 0 or st.gamma < 0 or st.epochs < 0:
            raise ConfigError(f"{name}: beta, gamma and epochs must be non-negative")
    if cfg.batch_size < 1 or cfg.lr <= 0:
        raise ConfigError("batch_size must be >= 1 and lr > 0")
    if cfg.data.n_train < 1 or cfg.data.n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")


# flag destination -> dotted config path, per command
FLAG_PATHS = {
    "simulate": {"count": "count", "seed": "seed", "format": "format", "duration": "scene.duration"},
    "oracle-table": {"manifest": "manifest", "count": "count", "seed": "seed", "methods": "methods"},
    "isms-table": {"manifest": "manifest", "count": "count", "seed": "seed"},
    "train": {"seed": "seed", "epochs1": "stage1.epochs", "epochs2": "stage2.epochs", "beta1": "stage1.beta",
              "gamma2": "stage2.gamma", "n_train": "data.n_train", "n_val": "data.n_val", "lr": "lr",
              "batch_size": "batch_size", "no_stage2": "use_stage2", "detach_fcp": "detach_fcp_filters"},
    "stability-sweep": {"betas": "betas", "seeds": "seeds", "alpha_ref": "alpha_ref", "n_train": "base.data.n_train",
                        "n_val": "base.data.n_val", "epochs": "base.probation_epochs"},
    "evaluate": {"checkpoint": "checkpoint", "manifest": "manifest", "count": "count", "seed": "seed"},
}


# --------------------------------------------------------------------------
# helpers


def write_snapshot(out: Path, command: str, cfg, args) -> None:
    from . import __version__

    payload = {
        "version": __version__,
        "command": command,
        "config": to_dict(cfg),
        "run": {"output_dir": str(out), "threads": args.threads, "log_level": args.log_level},
    }
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def prepare_output(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {path} is not writable: {exc}") from exc
    return path


def parallel_map(fn, items, threads: int) -> list:
    """Ordered map over scenes; results do not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_scenes(cfg, threads: int) -> list:
    from .mixsim import make_scene, read_manifest

    if cfg.manifest:
        scenes, _ = read_manifest(cfg.manifest)
        return scenes
    return parallel_map(lambda s: make_scene(cfg.seed + s, cfg.scene), range(cfg.count), threads)


def write_text(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out: Path, args) -> int:
    from .mixsim import make_scene, write_manifest, write_scene

    def one(i):
        scene = make_scene(cfg.seed + i, cfg.scene)
        return write_scene(scene, out / f"scene_{i:04d}", cfg.format)

    entries = parallel_map(one, range(cfg.count), args.threads)
    write_manifest(out / "manifest.json", entries, cfg.scene, cfg.seed)
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def _table(report, labels, out: Path, stem: str) -> int:
    write_text(out / f"{stem}.csv", report.to_csv())
    text = report.to_text(labels)
    write_text(out / f"{stem}.txt", text)
    dump_json(out / f"{stem}.json", report.to_json())
    print(text)
    return EXIT_OK


def cmd_oracle_table(cfg, out: Path, args) -> int:
    from .metrics import ORACLE_LABELS, oracle_table

    scenes = load_scenes(cfg, args.threads)
    report = oracle_table(scenes, tuple(cfg.methods), cfg.stft, cfg.fcp, cfg.wiener)
    return _table(report, ORACLE_LABELS, out, "oracle_table")


def cmd_isms_table(cfg, out: Path, args) -> int:
    from .metrics import ISMS_LABELS, isms_table

    scenes = load_scenes(cfg, args.threads)
    report = isms_table(scenes, seed=cfg.seed, stft_cfg=cfg.stft)
    return _table(report, ISMS_LABELS, out, "isms_table")


def cmd_train(cfg, out: Path, args) -> int:
    from .losses import reports_to_csv
    from .separator import build_dataset, run_two_stage

    data = build_dataset(cfg.data, cfg.stft, cfg.fcp)
    record, trainer = run_two_stage(cfg, data, out / "checkpoints")
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in record.epochs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_text(out / "loss_trace.csv", reports_to_csv(trainer.traces))
    dump_json(out / "record.json", record.to_dict())
    last = record.epochs[-1] if record.epochs else {}
    print(f"seed {cfg.seed}: {record.status} (val SI-SNR {last.get('val_si_snr', float('nan')):.2f} dB after "
          f"{len(record.epochs)} epochs; best {record.best_val_si_snr:.2f} dB at epoch {record.best_epoch})")
    return EXIT_OK


def cmd_stability_sweep(cfg, out: Path, args) -> int:
    from .separator import build_dataset, stability_sweep, sweep_counts, sweep_table

    base = cfg.base
    data = build_dataset(base.data, base.stft, base.fcp)
    results = stability_sweep(cfg.betas, cfg.seeds, data, cfg.alpha_ref, base)
    counts = sweep_counts(results)
    rows = [{"beta": b, "alpha_ref": a, **run} for (b, a), runs in results.items() for run in runs]
    dump_json(out / "sweep.json", {"runs": rows,
                                   "counts": [{"beta": b, "alpha_ref": a, "successes": s, "failures": f}
                                              for (b, a), (s, f) in counts.items()]})
    lines = ["beta,alpha_ref,seed,status,val_si_snr"]
    lines += [f"{r['beta']:g},{r['alpha_ref']:g},{r['seed']},{r['status']},{r['val_si_snr']:.6f}" for r in rows]
    write_text(out / "sweep.csv", "\n".join(lines))
    text = sweep_table(results)
    betas = sorted({b for b, _ in counts})
    if len(betas) >= 2:
        lo, hi = (betas[0], cfg.alpha_ref), (betas[-1], cfg.alpha_ref)
        ok = counts[hi][1] <= counts[lo][1]
        text += (f"\n{'PASS' if ok else 'FAIL'}  failures(beta={betas[-1]:g}) = {counts[hi][1]}"
                 f" <= failures(beta={betas[0]:g}) = {counts[lo][1]}")
    write_text(out / "sweep.txt", text)
    print(text)
    return EXIT_OK


def cmd_evaluate(cfg, out: Path, args) -> int:
    import numpy as np

    from .separator import Trainer, evaluate, prepare_scene

    trainer = Trainer.load(cfg.checkpoint)
    net = trainer.best_net
    if net.n_freq != cfg.stft.n_freq:
        raise ConfigError(f"checkpoint expects F={net.n_freq} frequency bins but the STFT gives F={cfg.stft.n_freq}")
    scenes = load_scenes(cfg, args.threads)
    expected_sr = trainer.cfg.data.scene.sample_rate
    rows = []
    for i, scene in enumerate(scenes):
        if scene.sample_rate != expected_sr:
            raise ConfigError(f"scene {i} has sample rate {scene.sample_rate}; the checkpoint was trained at {expected_sr}")
        if not scene.images:
            raise DataError(f"scene {i} has no source images to evaluate against")
        prepared = prepare_scene(scene, cfg.stft, cfg.fcp)
        res = evaluate(net, [prepared], cfg.stft, cfg.fcp, with_sdr=cfg.with_sdr, per_source=True)
        for n, value in enumerate(res["per_source_si_snr"]):
            row = {"scene": i, "seed": scene.seed, "source": n, "si_snr": value}
            if cfg.with_sdr:
                row["sdr"] = res["per_source_sdr"][n]
            rows.append(row)
    summary = {"checkpoint": str(cfg.checkpoint), "n_scenes": len(scenes),
               "mean_si_snr": float(np.mean([r["si_snr"] for r in rows]))}
    if cfg.with_sdr:
        summary["mean_sdr"] = float(np.mean([r["sdr"] for r in rows]))
    dump_json(out / "eval.json", {"summary": summary, "per_source": rows})
    keys = ["scene", "seed", "source", "si_snr"] + (["sdr"] if cfg.with_sdr else [])
    lines = [",".join(keys)] + [",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys) for r in rows]
    write_text(out / "eval.csv", "\n".join(lines))
    for r in rows:
        extra = f", SDR {r['sdr']:.2f} dB" if cfg.with_sdr else ""
        print(f"scene {r['scene']} source {r['source']}: SI-SNR {r['si_snr']:.2f} dB{extra}")
    print(f"mean SI-SNR {summary['mean_si_snr']:.2f} dB over {len(scenes)} scenes")
    return EXIT_OK


HANDLERS = {
    "simulate": cmd_simulate,
    "oracle-table": cmd_oracle_table,
    "isms-table": cmd_isms_table,
    "train": cmd_train,
    "stability-sweep": cmd_stability_sweep,
    "evaluate": cmd_evaluate,
}


# --------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config or a config.json snapshot from an earlier run")
    common.add_argument("-o", "--output-dir", help=f"output directory (default ${OUTPUT_ENV}/<command>, else ./{DEFAULT_OUTPUT}/<command>)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker/BLAS thread cap")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    p = argparse.ArgumentParser(prog="eras", description="Reverberation-as-supervision separation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render synthetic scenes to WAV + manifest")
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--rt60", type=float, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--duration", type=float)
    s.add_argument("--format", choices=("float32", "pcm16"))

    for name, helptext in (("oracle-table", "oracle mixture-reconstruction table"), ("isms-table", "oracle ISMS table")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--manifest", help="scene manifest from `eras simulate`")
        t.add_argument("--count", type=int, help="scenes to draw when no manifest is given")
        t.add_argument("--seed", type=int)
        t.add_argument("--rt60", type=float, nargs=2, metavar=("MIN", "MAX"))
        if name == "oracle-table":
            t.add_argument("--methods", type=lambda x: x.split(","), help="comma list of wiener,fcp")

    t = sub.add_parser("train", parents=[common], help="two-stage unsupervised training")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs1", type=int, help="stage-1 epochs")
    t.add_argument("--epochs2", type=int, help="stage-2 epochs")
    t.add_argument("--beta1", type=float, help="stage-1 ISMS weight")
    t.add_argument("--gamma2", type=float, help="stage-2 ICC weight")
    t.add_argument("--n-train", dest="n_train", type=int)
    t.add_argument("--n-val", dest="n_val", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--no-stage2", dest="no_stage2", action="store_const", const=False, default=None)
    t.add_argument("--detach-fcp", dest="detach_fcp", action="store_const", const=True, default=None,
                   help="treat FCP filters as constants in the backward pass")

    w = sub.add_parser("stability-sweep", parents=[common], help="success/failure counts over betas x seeds")
    w.add_argument("--betas", type=_floats, help="comma list, e.g. 0,0.3")
    w.add_argument("--seeds", type=_ints, help="comma list, e.g. 0,1,2,3,4")
    w.add_argument("--alpha-ref", dest="alpha_ref", type=float)
    w.add_argument("--n-train", dest="n_train", type=int)
    w.add_argument("--n-val", dest="n_val", type=int)
    w.add_argument("--epochs", type=int, help="probation epochs per run")

    e = sub.add_parser("evaluate", parents=[common], help="FCP-aligned SI-SNR/SDR of a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--count", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--rt60", type=float, nargs=2, metavar=("MIN", "MAX"))
    return p


def _limit_threads(n: int) -> None:
    # only effective if numpy has not been imported yet (true for the console script)
    for var in THREAD_ENV:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _limit_threads(args.threads)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")

    from numpy.linalg import LinAlgError

    from .mixsim import SceneError, WavFormatError
    from .relrir import MappingError
    from .separator import CheckpointError, TrainingError

    try:
        cfg = resolve(args.command, args)
        out = Path(args.output_dir) if args.output_dir else Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT) / args.command
        out = prepare_output(out)
        write_snapshot(out, args.command, cfg, args)
        return HANDLERS[args.command](cfg, out, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SceneError, WavFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, MappingError, LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
