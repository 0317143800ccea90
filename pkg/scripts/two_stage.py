#!/usr/bin/env python3
"""Stage-2 fine-tuning versus continued stage-1 training from the same stage-1 state."""
import argparse
import copy
from dataclasses import replace

import numpy as np

from eras.separator import DatasetConfig, StageConfig, TrainConfig, Trainer, build_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs1", type=int, default=5)
    ap.add_argument("--epochs2", type=int, default=3)
    ap.add_argument("--gamma", type=float, default=0.1)
    ap.add_argument("--n-train", type=int, default=64)
    ap.add_argument("--n-val", type=int, default=16)
    args = ap.parse_args()

    data_cfg = DatasetConfig(n_train=args.n_train, n_val=args.n_val)
    base = TrainConfig(data=data_cfg, stage2=StageConfig(beta=0.0, gamma=args.gamma, epochs=args.epochs2,
                                                         warmup_steps=16))
    data = build_dataset(data_cfg, base.stft, base.fcp)
    rows = []
    for seed in range(args.seeds):
        tr = Trainer(replace(base, seed=seed), data.train[0].specs[0].shape[1])
        for _ in range(args.epochs1):
            tr.run_epoch(data)
        cont, fine = copy.deepcopy(tr), copy.deepcopy(tr)
        fine.switch_stage()
        for _ in range(args.epochs2):
            cont.run_epoch(data)
            fine.run_epoch(data)
        rows.append((tr.record.epochs[-1]["val_si_snr"], cont.record.epochs[-1]["val_si_snr"],
                     fine.record.epochs[-1]["val_si_snr"]))
        print(f"seed {seed}: stage 1 {rows[-1][0]:.2f} dB -> continued {rows[-1][1]:.2f} dB, "
              f"fine-tuned {rows[-1][2]:.2f} dB")
    m = np.mean(rows, axis=0)
    print(f"mean: stage 1 {m[0]:.2f}, continued {m[1]:.2f}, fine-tuned {m[2]:.2f} dB")


if __name__ == "__main__":
    main()
