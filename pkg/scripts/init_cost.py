"""Prompt construction time per strategy on a synthetic 10^5-token pool."""

import argparse

import numpy as np

from spt_lab.prompt_init import STRATEGIES, TokenPool, init_timer


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=100_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--np", type=int, default=8)
    args = ap.parse_args()
    pool = TokenPool(0, np.random.default_rng(0).normal(size=(args.tokens, args.dim)))
    for strategy in STRATEGIES:
        print(f"{strategy:15s} {init_timer(strategy, pool, args.np) * 1e3:10.2f} ms")


if __name__ == "__main__":
    main()
