"""VPT-deep vs SPT-deep validation curves and the layer-correspondence ablation."""

import argparse
import csv

import numpy as np

from spt_lab.experiments import DeskSetup, epochs_to_reach, pretrained_backbone, run_tuning

RUNS = [("random-uniform", "self_prompt"), ("random-sample", "self_prompt"),
        ("random-sample", "first_P0"), ("random-sample", "last_PL")]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", default="runs/backbone.sptc")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/convergence.csv")
    args = ap.parse_args()
    setup = DeskSetup()
    model = pretrained_backbone(setup, args.backbone)
    curves = {}
    for strategy, source in RUNS:
        results = [run_tuning(model, setup, s, strategy, source, probe=False) for s in range(args.seeds)]
        curves[f"{strategy}/{source}"] = np.mean([r.val_acc for r in results], axis=0)
        print(f"{strategy}/{source}: final {curves[f'{strategy}/{source}'][-1]:.3f}", flush=True)
    vpt, spt = curves["random-uniform/self_prompt"], curves["random-sample/self_prompt"]
    print(f"SPT reaches the VPT final accuracy {vpt[-1]:.3f} at epoch {epochs_to_reach(spt, vpt[-1])}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "val_acc"])
        for name, curve in curves.items():
            w.writerows((name, e, f"{v:.6f}") for e, v in enumerate(curve, start=1))


if __name__ == "__main__":
    main()
