"""Frozen-prompt probing: only the head trains, prompts stay at their initial values."""

import argparse

import numpy as np

from spt_lab.experiments import DeskSetup, pretrained_backbone, run_tuning


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", default="runs/backbone.sptc")
    ap.add_argument("--strategies", default="random-uniform,random-sample,kmeans,mean-pool,max-pool")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--np", type=int, default=None, help="prompt length (default: desk setting)")
    args = ap.parse_args()
    setup = DeskSetup()
    if args.np is not None:
        setup.n_prompts = args.np
    model = pretrained_backbone(setup, args.backbone)
    for strategy in args.strategies.split(","):
        finals = [run_tuning(model, setup, s, strategy, frozen=True, probe=False).val_acc[-1] for s in range(args.seeds)]
        print(f"{strategy:15s} frozen final val {np.mean(finals):.3f}  per seed {np.round(finals, 3).tolist()}",
              flush=True)


if __name__ == "__main__":
    main()
