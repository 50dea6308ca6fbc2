"""Train the desk-scale backbone on the synthetic source task and cache it."""

import argparse
import time

from spt_lab.experiments import DeskSetup, pretrained_backbone
from spt_lab.trainer import accuracy
from spt_lab.dataio import synth_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/backbone.sptc")
    args = ap.parse_args()
    setup = DeskSetup()
    start = time.perf_counter()
    model = pretrained_backbone(setup, args.out)
    val = synth_dataset(setup.source).subset("val")
    # the cached file keeps the source head, so this is the source-task val accuracy
    print(f"backbone at {args.out} ({time.perf_counter() - start:.0f} s), "
          f"source val accuracy {accuracy(model, None, val.images, val.labels):.3f}")


if __name__ == "__main__":
    main()
