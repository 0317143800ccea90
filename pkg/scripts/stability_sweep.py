#!/usr/bin/env python3
"""Stage-1 success/failure counts over ISMS weights and seeds."""
import argparse
import json
import time
from dataclasses import replace

from eras.separator import DatasetConfig, TrainConfig, build_dataset, stability_sweep, sweep_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--betas", default="0,0.3", help="comma list")
    ap.add_argument("--seeds", type=int, default=5, help="seeds 0..n-1")
    ap.add_argument("--alpha-ref", type=float, default=0.0)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-val", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=5, help="probation epochs")
    ap.add_argument("--json", help="write per-run results here")
    args = ap.parse_args()

    base = TrainConfig(probation_epochs=args.epochs, data=DatasetConfig(n_train=args.n_train, n_val=args.n_val))
    data = build_dataset(base.data, base.stft, base.fcp)
    betas = [float(b) for b in args.betas.split(",")]
    t0 = time.perf_counter()
    results = stability_sweep(betas, range(args.seeds), data, args.alpha_ref, replace(base))
    print(sweep_table(results))
    for (beta, _), runs in sorted(results.items()):
        print(f"beta={beta:g}: " + ", ".join(f"seed {r['seed']} {r['val_si_snr']:.2f} dB" for r in runs))
    print(f"[{(time.perf_counter() - t0) / 60:.1f} min]")
    if args.json:
        with open(args.json, "w") as f:
            json.dump([{"beta": b, "alpha_ref": a, "runs": v} for (b, a), v in sorted(results.items())], f, indent=2)


if __name__ == "__main__":
    main()
