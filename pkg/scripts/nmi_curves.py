"""NMI between prompts and patch tokens per layer: at init for every strategy, and across VPT training."""

import argparse

import numpy as np

from spt_lab.diagnostics import nmi_trace, write_curve_csv
from spt_lab.experiments import DeskSetup, downstream_task, make_prompts, pretrained_backbone, run_tuning
from spt_lab.prompt_init import STRATEGIES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", default="runs/backbone.sptc")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", default="runs/vpt_nmi.csv")
    args = ap.parse_args()
    setup = DeskSetup()
    model = pretrained_backbone(setup, args.backbone)
    for strategy in ("random-uniform", *STRATEGIES):
        scores = []
        for seed in range(args.seeds):
            train_set, val_set = downstream_task(setup, seed)
            prompts = make_prompts(model, train_set, strategy, seed, setup)
            scores.append(nmi_trace(model, prompts, val_set.images[:setup.probe_images]))
        print(f"init NMI {strategy:15s} mean {np.mean(scores):.4f} per layer {np.round(np.mean(scores, 0), 4).tolist()}")
    curves = np.mean([run_tuning(model, setup, s, "random-uniform").nmi for s in range(args.seeds)], axis=0)
    print("VPT epoch 0:", np.round(curves[0], 4).tolist())
    print("VPT final:  ", np.round(curves[-1], 4).tolist())
    write_curve_csv(args.out, [(e, layer, float(v)) for e, row in enumerate(curves)
                               for layer, v in enumerate(row, start=1)])


if __name__ == "__main__":
    main()
