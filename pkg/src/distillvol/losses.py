"""Region mapping, training losses and evaluation metrics.

Regions are the three overlapping tumor sub-regions in channel order
WT (whole tumor), TC (tumor core), ET (enhancing tumor).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

REGIONS = ("WT", "TC", "ET")
LABEL_VALUES = (0, 1, 2, 4)
# raw label -> membership in (WT, TC, ET)
REGION_MEMBERS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}

DICE_EPS = 1e-5
PROB_CLAMP = 1e-7


def validate_labels(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise ValueError(f"invalid label value(s) {bad.tolist()}; allowed {list(LABEL_VALUES)}")


def labels_to_regions(labels: np.ndarray) -> np.ndarray:
    """(D,H,W) label map with values {0,1,2,4} -> (3,D,H,W) uint8 region masks."""
    labels = np.asarray(labels)
    validate_labels(labels)
    return np.stack([np.isin(labels, REGION_MEMBERS[r]) for r in REGIONS]).astype(np.uint8)


def regions_to_labels(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize region channels and resolve them to one label per voxel.

    The deepest nested region wins: ET -> 4, else TC -> 1, else WT -> 2.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs)
    wt, tc, et = (probs[i] >= threshold for i in range(3))
    labels = np.zeros(probs.shape[1:], dtype=np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    return labels


# ---------------------------------------------------------------------------
# losses


def _as_target(g, like: Tensor) -> Tensor:
    if isinstance(g, Tensor):
        return g
    return Tensor(np.asarray(g, dtype=like.dtype))


def _region_axes(p: Tensor) -> tuple[int, ...]:
    # channel axis is -4 for both (3,D,H,W) and (N,3,D,H,W)
    if p.ndim not in (4, 5):
        raise ValueError(f"region probabilities must be (3,D,H,W) or (N,3,D,H,W), got {p.shape}")
    channel = p.ndim - 4
    return tuple(ax for ax in range(p.ndim) if ax != channel)


def soft_dice_loss(p: Tensor, g, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over regions of (2 sum pg + eps) / (sum p^2 + g^2 + eps).

    Sums run over every voxel (and sample) of a region.
    """
    g = _as_target(g, p)
    if p.shape != g.shape:
        raise ValueError(f"soft_dice_loss: shape mismatch {p.shape} vs {g.shape}")
    axes = _region_axes(p)
    inter = (p * g).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + Tensor((g.data * g.data).sum(axis=axes))
    similarity = (inter * 2.0 + eps) / (denom + eps)
    return 1.0 - similarity.mean()


def bce_loss(p: Tensor, g, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy over all regions and voxels."""
    g = _as_target(g, p)
    if p.shape != g.shape:
        raise ValueError(f"bce_loss: shape mismatch {p.shape} vs {g.shape}")
    pc = T.clip(p, clamp, 1.0 - clamp)
    ll = g * T.log(pc) + (1.0 - g) * T.log(1.0 - pc)
    return -ll.mean()


@dataclass
class LossValue:
    dice: Tensor
    bce: Tensor
    total: Tensor
    K: int
    N: int

    @property
    def dice_part(self) -> float:
        return self.dice.item()

    @property
    def bce_part(self) -> float:
        return self.bce.item()

    @property
    def total_value(self) -> float:
        return self.total.item()


def combined_loss(p: Tensor, g) -> LossValue:
    """Soft Dice loss plus binary cross-entropy."""
    g = _as_target(g, p)
    dice = soft_dice_loss(p, g)
    bce = bce_loss(p, g)
    k = p.shape[-4]
    return LossValue(dice=dice, bce=bce, total=dice + bce, K=k, N=p.size // k)


# ---------------------------------------------------------------------------
# metrics


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Hard Dice overlap; empty vs empty scores 1.0, empty vs non-empty 0.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice_score: shape mismatch {pred.shape} vs {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError(f"dice_score: {name} mask is not binary")
    a = pred.astype(bool)
    b = gt.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def region_dice(pred_regions: np.ndarray, gt_regions: np.ndarray) -> dict[str, float]:
    return {r: dice_score(pred_regions[i], gt_regions[i]) for i, r in enumerate(REGIONS)}


@dataclass(frozen=True)
class RegionSummary:
    mean: float
    median: float
    q1: float
    q3: float
    min: float
    max: float
    n: int


def summarize_metrics(records: Sequence[Mapping[str, float]]) -> dict[str, RegionSummary]:
    """Per-region mean, median, quartiles and range over per-case Dice.

    ``records`` hold keys WT, TC, ET. Quartiles use linear interpolation
    between order statistics.
    """
    if not records:
        raise ValueError("summarize_metrics needs at least one record")
    out = {}
    for r in REGIONS:
        vals = np.array([rec[r] for rec in records], dtype=np.float64)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out[r] = RegionSummary(
            mean=float(vals.mean()),
            median=float(med),
            q1=float(q1),
            q3=float(q3),
            min=float(vals.min()),
            max=float(vals.max()),
            n=len(vals),
        )
    return out


# ---------------------------------------------------------------------------
# export

CASE_COLUMNS = ("case_id", "dice_wt", "dice_tc", "dice_et")
BOXPLOT_COLUMNS = ("region", "min", "q1", "median", "q3", "max")


def write_case_csv(path: Union[str, Path], rows: Iterable[tuple[str, Mapping[str, float]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CASE_COLUMNS)
        for case_id, d in rows:
            w.writerow([case_id, repr(d["WT"]), repr(d["TC"]), repr(d["ET"])])


def read_case_csv(path: Union[str, Path]) -> list[tuple[str, dict[str, float]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CASE_COLUMNS:
            raise ValueError(f"{path}: expected columns {CASE_COLUMNS}, got {reader.fieldnames}")
        return [
            (row["case_id"], {"WT": float(row["dice_wt"]), "TC": float(row["dice_tc"]), "ET": float(row["dice_et"])})
            for row in reader
        ]


def write_boxplot_csv(path: Union[str, Path], summary: Mapping[str, RegionSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BOXPLOT_COLUMNS)
        # region order of the result tables: ET, WT, TC
        for r in ("ET", "WT", "TC"):
            s = summary[r]
            w.writerow([r, repr(s.min), repr(s.q1), repr(s.median), repr(s.q3), repr(s.max)])


def format_table(rows: Sequence[tuple[str, Mapping[str, float]]]) -> str:
    """Method | Dice ET | Dice WT | Dice TC table, one row per method."""
    lines = ["Method\tDice ET\tDice WT\tDice TC"]
    for method, d in rows:
        lines.append(f"{method}\t{d['ET']:.4f}\t{d['WT']:.4f}\t{d['TC']:.4f}")
    return "\n".join(lines) + "\n"


def format_summary(method: str, summary: Mapping[str, RegionSummary]) -> str:
    table = format_table([(method, {r: s.mean for r, s in summary.items()})])
    stats = ["", "region\tmean\tmedian\tq1\tq3\tmin\tmax\tn"]
    for r in ("ET", "WT", "TC"):
        s = summary[r]
        stats.append(f"{r}\t{s.mean:.4f}\t{s.median:.4f}\t{s.q1:.4f}\t{s.q3:.4f}\t{s.min:.4f}\t{s.max:.4f}\t{s.n}")
    return table + "\n".join(stats) + "\n"
