"""Training loop over manual and ensemble-labeled cases."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import data as D
from . import tensor as T
from .losses import combined_loss, labels_to_regions
from .nn import Network
from .optim import LrSchedule, init_state, lr_at, optimizer_step

logger = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, lr: float, dice: float, bce: float):
        self.iteration, self.lr, self.dice, self.bce = iteration, lr, dice, bce
        super().__init__(f"non-finite loss at iteration {iteration} (lr={lr:g}, dice={dice!r}, bce={bce!r})")


@dataclass(frozen=True)
class TrainConfig:
    arch: str
    patch: tuple[int, int, int]
    batch_size: int
    schedule: LrSchedule
    iterations: Optional[int] = None
    epochs: Optional[int] = None
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    augment: Optional[D.AugmentParams] = field(default_factory=D.AugmentParams)
    resample_to: Optional[tuple[int, int, int]] = None
    hard_labels: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if (self.iterations is None) == (self.epochs is None):
            raise ValueError("set exactly one of iterations or epochs")
        count = self.iterations if self.iterations is not None else self.epochs
        if count < 1:
            raise ValueError(f"training length must be positive, got {count}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch must be three positive extents, got {self.patch}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def total_iterations(self, n_cases: int) -> int:
        if self.iterations is not None:
            return self.iterations
        return self.epochs * self.iterations_per_epoch(n_cases)

    def iterations_per_epoch(self, n_cases: int) -> int:
        return max(1, math.ceil(n_cases / self.batch_size))


# the recipes as published; far beyond desk scale, kept for reference runs
PAPER_PROFILES = {
    "unet": TrainConfig(
        arch="unet",
        patch=(128, 128, 128),
        batch_size=2,
        iterations=160_000,
        optimizer="adam",
        schedule=LrSchedule("step_drop", 1e-4, drop_iter=120_000, factor=0.1),
    ),
    # 144x144x128 (X, Y, Z) stored as (D, H, W)
    "res_unet": TrainConfig(
        arch="res_unet",
        patch=(128, 144, 144),
        batch_size=2,
        iterations=160_000,
        optimizer="adam",
        schedule=LrSchedule("step_drop", 1e-4, drop_iter=120_000, factor=0.1),
    ),
    "cascaded_unet": TrainConfig(
        arch="cascaded_unet",
        patch=(128, 128, 128),
        batch_size=4,
        epochs=500,
        optimizer="sgd_momentum",
        momentum=0.9,
        schedule=LrSchedule("exp_epoch", 0.1, rate=0.99),
        resample_to=(128, 128, 128),
    ),
}


@dataclass
class TrainingCase:
    """Normalized image plus region targets (hard masks or soft probabilities)."""

    case_id: str
    image: np.ndarray  # (4, D, H, W) float32
    target: np.ndarray  # (3, D, H, W) float32
    provenance: str

    @property
    def soft(self) -> bool:
        return self.provenance == "ensemble"

    @classmethod
    def from_scan(cls, scan: D.MultiModalScan) -> "TrainingCase":
        if scan.labels is None:
            raise ValueError(f"{scan.case_id}: case has no labels")
        return cls(scan.case_id, D.preprocess(scan), labels_to_regions(scan.labels).astype(np.float32), "manual")

    @classmethod
    def from_pseudo(cls, pseudo, hard: bool = False) -> "TrainingCase":
        if pseudo.scan is None:
            raise ValueError(f"{pseudo.case_id}: pseudo-label has no attached scan")
        target = pseudo.probs.astype(np.float32)
        if hard:
            target = (target >= 0.5).astype(np.float32)
        return cls(pseudo.case_id, D.preprocess(pseudo.scan), target, "ensemble")


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    lr: float
    dice: float
    bce: float
    total: float


@dataclass
class TrainResult:
    history: list[LossRecord]
    checkpoints: list[Path] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.history])


LOSS_LOG_COLUMNS = ("iteration", "lr", "dice_part", "bce_part", "total")


def write_loss_log(path: Union[str, Path], history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_LOG_COLUMNS)
        for r in history:
            w.writerow([r.iteration, repr(r.lr), repr(r.dice), repr(r.bce), repr(r.total)])


def _prepare(case: TrainingCase, cfg: TrainConfig) -> TrainingCase:
    if cfg.resample_to is None or case.image.shape[1:] == tuple(cfg.resample_to):
        return case
    target_mode = "trilinear" if case.soft else "nearest"
    return TrainingCase(
        case.case_id,
        D.resample(case.image, cfg.resample_to, "trilinear"),
        D.resample(case.target, cfg.resample_to, target_mode),
        case.provenance,
    )


def sample_patch(case: TrainingCase, cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    fg = case.target[0] >= 0.5
    if fg.any():
        off = D.crop_offset(fg, cfg.patch, rng)
    else:
        # soft targets with no confident tumor: any offset will do
        off = tuple(int(rng.integers(e - p + 1)) for e, p in zip(case.image.shape[1:], cfg.patch))
    image = D.crop(case.image, off, cfg.patch)
    target = D.crop(case.target, off, cfg.patch)
    if cfg.augment is not None:
        draw = D.draw_augmentation(cfg.augment, image.shape[0], rng)
        image, target = D.augment_arrays(image, target, draw, target_order=1 if case.soft else 0)
    return np.ascontiguousarray(image), np.ascontiguousarray(target)


def case_rng(seed: int, case_index: int, epoch: int, slot: int) -> np.random.Generator:
    """Per-sample stream; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([seed, case_index, epoch, slot]))


def train(
    net: Network,
    dataset: Sequence[TrainingCase],
    cfg: TrainConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    log_every: int = 0,
) -> TrainResult:
    """Minimize Dice + BCE over random foreground patches.

    Manual cases contribute binary region masks, ensemble cases their soft
    probabilities, both used directly as the target.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    bad = [e for e in cfg.patch if e % net.divisor]
    if bad:
        raise ValueError(f"patch {cfg.patch} not divisible by {net.divisor} as {net.arch} requires")
    cases = [_prepare(c, cfg) for c in dataset]
    for c in cases:
        if any(p > e for p, e in zip(cfg.patch, c.image.shape[1:])):
            raise ValueError(f"{c.case_id}: patch {cfg.patch} exceeds extents {c.image.shape[1:]}")

    params = net.parameters()
    hyper = {"momentum": cfg.momentum} if cfg.optimizer == "sgd_momentum" else {}
    state = init_state(cfg.optimizer, [p.data for p in params], **hyper)
    n = len(cases)
    per_epoch = cfg.iterations_per_epoch(n)
    total_iters = cfg.total_iterations(n)
    result = TrainResult(history=[])
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    perm = None
    for it in range(total_iters):
        epoch, pos = divmod(it, per_epoch)
        if pos == 0 or perm is None:
            perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(n)
        lr = lr_at(cfg.schedule, epoch if cfg.schedule.kind == "exp_epoch" else it)

        images, targets = [], []
        for b in range(cfg.batch_size):
            slot = pos * cfg.batch_size + b
            idx = int(perm[slot % n])
            img, tgt = sample_patch(cases[idx], cfg, case_rng(cfg.seed, idx, epoch, slot))
            images.append(img)
            targets.append(tgt)
        x = T.Tensor(np.stack(images))
        g = np.stack(targets)

        net.zero_grad()
        loss = combined_loss(T.sigmoid(net(x)), g)
        dice, bce = loss.dice_part, loss.bce_part
        if not (math.isfinite(dice) and math.isfinite(bce)):
            raise NonFiniteLossError(it, lr, dice, bce)
        loss.total.backward()
        optimizer_step(state, [p.data for p in params], [p.grad for p in params], lr)
        result.history.append(LossRecord(it, lr, dice, bce, loss.total_value))

        if log_every and (it + 1) % log_every == 0:
            logger.info("iter %d lr %.3g loss %.4f (dice %.4f bce %.4f)", it + 1, lr, loss.total_value, dice, bce)
        if checkpoint_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"checkpoint_{it + 1:07d}.dvw"
            net.save(path)
            result.checkpoints.append(path)
    net.zero_grad()
    return result
