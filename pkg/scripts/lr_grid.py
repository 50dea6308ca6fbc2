"""Per-strategy base learning-rate grid, 5 seeds each, scored by final val accuracy."""

import argparse
import json

import numpy as np

from spt_lab.experiments import DeskSetup, pretrained_backbone, run_tuning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", default="runs/backbone.sptc")
    ap.add_argument("--strategies", default="random-uniform,random-sample")
    ap.add_argument("--lrs", default="3e-3,1e-2,3e-2,5e-2,1e-1")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/lr_grid.json")
    args = ap.parse_args()
    setup = DeskSetup()
    model = pretrained_backbone(setup, args.backbone)
    table = {}
    for strategy in args.strategies.split(","):
        for lr in map(float, args.lrs.split(",")):
            finals = [run_tuning(model, setup, s, strategy, lr=lr, probe=False).val_acc[-1] for s in range(args.seeds)]
            table.setdefault(strategy, {})[lr] = float(np.mean(finals))
            print(f"{strategy:15s} lr {lr:.0e}  final val {np.mean(finals):.3f}  per seed {np.round(finals, 3).tolist()}",
                  flush=True)
        best = max(table[strategy], key=table[strategy].get)
        print(f"{strategy}: best lr {best:.0e}")
    with open(args.out, "w") as fh:
        json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
