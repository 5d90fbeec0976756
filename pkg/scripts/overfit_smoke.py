"""Overfit one synthetic 32^3 case with each architecture and print the loss ratio and Dice."""

import argparse
import logging

from distillvol.experiments import run_overfit
from distillvol.nn import ARCHITECTURES


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--arch", choices=ARCHITECTURES, action="append", help="default: all three")
    parser.add_argument("--iterations", type=int, default=500)
    parser.add_argument("--case-seed", type=int, default=0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    for arch in args.arch or ARCHITECTURES:
        res = run_overfit(arch, args.iterations, args.case_seed, args.seed)
        ratio = res.ratio_at(min(200, args.iterations))
        dice = "  ".join(f"{r} {v:.3f}" for r, v in res.dice.items())
        print(f"{arch:<14} loss ratio@200 {ratio:.3f}  {dice}  ({res.seconds:.0f}s)")


if __name__ == "__main__":
    main()
