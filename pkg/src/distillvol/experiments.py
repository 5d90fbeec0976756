"""Desk-scale experiments: single-case overfitting and a synthetic
teacher-ensemble-student run.

Both are small enough for a laptop CPU and fully seed-pinned.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as D
from .distill import distill, ensemble_predict, predict_member, pseudo_label
from .nn import ARCHITECTURES, NetConfig, Network, build_network, default_config
from .optim import LrSchedule
from .report import EvalReport, evaluate_cases
from .train import TrainConfig, TrainingCase, TrainResult, train

logger = logging.getLogger(__name__)


def desk_profile(arch: str, base_channels: int = 8) -> NetConfig:
    """Small networks for CPU runs; the cascade drops to three levels so a
    32-voxel volume still divides through both stages."""
    return default_config(arch, base_channels, **({"levels": 3} if arch == "cascaded_unet" else {}))


# ---------------------------------------------------------------------------
# overfit smoke


@dataclass
class OverfitResult:
    arch: str
    seconds: float
    history: TrainResult
    dice: dict[str, float]

    @property
    def initial_mean(self) -> float:
        return float(self.history.totals()[:10].mean())

    def ratio_at(self, iteration: int = 200) -> float:
        """Mean loss of the ten iterations ending at ``iteration`` over the first ten."""
        totals = self.history.totals()
        return float(totals[iteration - 10 : iteration].mean() / self.initial_mean)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))


def run_overfit(arch: str, iterations: int = 500, case_seed: int = 0, seed: int = 0, lr: float = 3e-3) -> OverfitResult:
    scan = D.generate_synthetic_case(case_seed, (32, 32, 32))
    net = build_network(arch, desk_profile(arch), seed=seed)
    cfg = TrainConfig(
        arch=arch,
        patch=(32, 32, 32),
        batch_size=1,
        iterations=iterations,
        schedule=LrSchedule("constant", lr),
        optimizer="adam",
        seed=seed,
        augment=None,
    )
    start = time.perf_counter()
    history = train(net, [TrainingCase.from_scan(scan)], cfg)
    report = evaluate_cases(lambda im: predict_member(net, im), [scan], arch)
    return OverfitResult(arch, time.perf_counter() - start, history, report.rows[0][1])


# ---------------------------------------------------------------------------
# synthetic distillation


@dataclass(frozen=True)
class DistillSetup:
    n_labeled: int = 20
    n_unlabeled: int = 40
    n_eval: int = 10
    extent: int = 32
    base_channels: int = 8
    iterations: int = 600
    lr: float = 1e-3
    seed: int = 0
    # None: as many passes over its (larger) training set as the teachers made
    student_iterations: Optional[int] = None

    def student_budget(self) -> int:
        if self.student_iterations is not None:
            return self.student_iterations
        return round(self.iterations * (self.n_labeled + self.n_unlabeled) / self.n_labeled)


@dataclass
class DistillOutcome:
    reports: dict[str, EvalReport]
    seconds: dict[str, float] = field(default_factory=dict)

    def wt(self, method: str) -> float:
        return self.reports[method].mean("WT")

    @property
    def teachers(self) -> list[str]:
        return [m for m in self.reports if m in ARCHITECTURES]


def synthetic_split(setup: DistillSetup):
    """Disjoint labeled / unlabeled / held-out synthetic cases, grades alternating."""
    ext = (setup.extent,) * 3

    def make(offset, n, prefix, labeled):
        return [
            D.generate_synthetic_case(
                int(np.random.SeedSequence([setup.seed, offset, i]).generate_state(1)[0]),
                ext,
                case_id=f"{prefix}_{i:03d}",
                grade="HGG" if i % 2 == 0 else "LGG",
                labeled=labeled,
            )
            for i in range(n)
        ]

    return (
        make(1, setup.n_labeled, "lab", True),
        make(2, setup.n_unlabeled, "unl", False),
        make(3, setup.n_eval, "val", True),
    )


def desk_train_config(arch: str, setup: DistillSetup, iterations: Optional[int] = None) -> TrainConfig:
    # every network gets the same short recipe: Adam, one tenfold drop at 80%
    iterations = iterations or setup.iterations
    return TrainConfig(
        arch=arch,
        patch=(setup.extent,) * 3,
        batch_size=1,
        iterations=iterations,
        schedule=LrSchedule("step_drop", setup.lr, drop_iter=int(0.8 * iterations), factor=0.1),
        optimizer="adam",
        seed=setup.seed,
        augment=D.AugmentParams(),
    )


def run_distillation(setup: DistillSetup = DistillSetup()) -> DistillOutcome:
    labeled, unlabeled, held = synthetic_split(setup)
    outcome = DistillOutcome({})
    teachers: list[Network] = []
    for arch in ARCHITECTURES:
        start = time.perf_counter()
        net = build_network(arch, desk_profile(arch, setup.base_channels), seed=setup.seed)
        train(net, [TrainingCase.from_scan(s) for s in labeled], desk_train_config(arch, setup))
        teachers.append(net)
        outcome.reports[arch] = evaluate_cases(lambda im, n=net: predict_member(n, im), held, arch)
        outcome.seconds[arch] = time.perf_counter() - start
        logger.info("%s teacher: WT %.4f (%.0fs)", arch, outcome.wt(arch), outcome.seconds[arch])

    start = time.perf_counter()
    outcome.reports["Ensemble"] = evaluate_cases(lambda im: ensemble_predict(teachers, im), held, "Ensemble")
    pseudo = pseudo_label(teachers, unlabeled)
    outcome.seconds["Ensemble"] = time.perf_counter() - start

    start = time.perf_counter()
    student, _ = distill(
        labeled,
        pseudo,
        desk_profile("res_unet", setup.base_channels),
        desk_train_config("res_unet", setup, setup.student_budget()),
        eval_ids={s.case_id for s in held},
    )
    outcome.reports["Distilled"] = evaluate_cases(lambda im: predict_member(student, im), held, "Distilled")
    outcome.seconds["Distilled"] = time.perf_counter() - start
    return outcome


def distillation_checks(outcome: DistillOutcome, ensemble_margin: float = 0.01, student_margin: float = 0.02) -> dict[str, bool]:
    ens = outcome.wt("Ensemble")
    best = max(outcome.wt(t) for t in outcome.teachers)
    checks = {f"ensemble >= {t} - {ensemble_margin}": ens >= outcome.wt(t) - ensemble_margin for t in outcome.teachers}
    checks[f"student >= best teacher - {student_margin}"] = outcome.wt("Distilled") >= best - student_margin
    return checks


def outcome_table(outcome: DistillOutcome) -> list[tuple[str, dict[str, float]]]:
    return [(m, {r: rep.mean(r) for r in ("ET", "WT", "TC")}) for m, rep in outcome.reports.items()]
