"""Train three teachers, ensemble them, distill a res_unet student and
compare mean Dice on held-out synthetic cases."""

import argparse
import dataclasses
import logging

from distillvol.experiments import DistillSetup, distillation_checks, outcome_table, run_distillation
from distillvol.losses import format_table


def main():
    defaults = DistillSetup()
    parser = argparse.ArgumentParser(description=__doc__)
    for f in dataclasses.fields(DistillSetup):
        default = getattr(defaults, f.name)
        kind = int if default is None else type(default)
        parser.add_argument(f"--{f.name.replace('_', '-')}", type=kind, default=default)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    outcome = run_distillation(DistillSetup(**vars(args)))
    print(format_table(outcome_table(outcome)), end="")
    for name, ok in distillation_checks(outcome).items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print("seconds: " + ", ".join(f"{k} {v:.0f}" for k, v in outcome.seconds.items()))


if __name__ == "__main__":
    main()
