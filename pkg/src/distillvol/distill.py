"""Ensemble fusion, pseudo-labeling of unlabeled scans and student training."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Optional, Sequence, Union

import numpy as np

from . import data as D
from .nn import NetConfig, Network, build_res_unet, forward_full_volume
from .train import TrainConfig, TrainingCase, TrainResult, train

logger = logging.getLogger(__name__)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DISTILLVOL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PseudoLabeledCase:
    case_id: str
    probs: np.ndarray  # (3, D, H, W) in [0, 1]
    scan: Optional[D.MultiModalScan] = None
    provenance: str = "ensemble"

    def __post_init__(self):
        if self.probs.ndim != 4 or self.probs.shape[0] != 3:
            raise ValueError(f"{self.case_id}: pseudo-label must be (3,D,H,W), got {self.probs.shape}")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError(f"{self.case_id}: pseudo-label probabilities outside [0, 1]")


def predict_member(model, image: np.ndarray, overlap: float = 0.5) -> np.ndarray:
    """Region probabilities of one member at the scan's native extents.

    Members with a fixed ``input_extent`` (the cascade) see a resampled scan
    and their output is resampled back.
    """
    native = image.shape[1:]
    extent = getattr(model, "input_extent", None)
    x = image if extent is None else D.resample(image, extent, "trilinear")
    probs = forward_full_volume(model, x[None], getattr(model, "inference_patch", None), overlap)
    if extent is not None:
        probs = np.clip(D.resample(probs, native, "trilinear"), 0.0, 1.0)
    return probs


def ensemble_predict(models: Sequence, image: np.ndarray, overlap: float = 0.5) -> np.ndarray:
    """Uniform average of member probabilities (post-sigmoid).

    ``image`` is a preprocessed (4, D, H, W) scan.
    """
    if not models:
        raise ValueError("ensemble needs at least one model")
    acc = np.zeros((3,) + image.shape[1:], dtype=np.float64)
    for m in models:
        acc += predict_member(m, image, overlap)
    return (acc / len(models)).astype(np.float32)


# ---------------------------------------------------------------------------
# pseudo-label store: <store>/<case_id>/{probs.dvv, case.meta}


def save_pseudo_label(case: PseudoLabeledCase, store: Union[str, Path]) -> Path:
    case_dir = Path(store) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    D.save_volume(case_dir / "probs.dvv", case.probs.astype(np.float32))
    meta = {"case_id": case.case_id, "provenance": case.provenance}
    (case_dir / "case.meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return case_dir


def load_pseudo_label(case_dir: Union[str, Path]) -> PseudoLabeledCase:
    case_dir = Path(case_dir)
    meta = json.loads((case_dir / "case.meta").read_text(encoding="utf-8"))
    if meta.get("provenance") != "ensemble":
        raise ValueError(f"{case_dir}: provenance {meta.get('provenance')!r} is not ensemble")
    return PseudoLabeledCase(meta["case_id"], D.load_volume(case_dir / "probs.dvv"))


def load_pseudo_store(store: Union[str, Path], scans_root: Optional[Union[str, Path]] = None) -> list[PseudoLabeledCase]:
    """Load every stored pseudo-label, attaching scans from ``scans_root``."""
    store = Path(store)
    out = []
    for case_dir in sorted(p for p in store.iterdir() if (p / "probs.dvv").exists()):
        case = load_pseudo_label(case_dir)
        if scans_root is not None:
            case.scan = D.load_scan(Path(scans_root) / case.case_id)
        out.append(case)
    return out


def pseudo_label(
    models: Sequence,
    cases: Sequence[D.MultiModalScan],
    store: Optional[Union[str, Path]] = None,
    overlap: float = 0.5,
) -> list[PseudoLabeledCase]:
    """Annotate unlabeled scans with the ensemble's soft region probabilities.

    Already-labeled scans are skipped with a warning.
    """
    todo = []
    for scan in cases:
        if scan.labels is not None or scan.provenance == "manual":
            logger.warning("%s already has labels; not pseudo-labeling it", scan.case_id)
            continue
        todo.append(scan)

    def one(scan: D.MultiModalScan) -> PseudoLabeledCase:
        probs = ensemble_predict(models, D.preprocess(scan), overlap)
        case = PseudoLabeledCase(scan.case_id, probs, scan)
        if store is not None:
            save_pseudo_label(case, store)
        return case

    workers = worker_count()
    if workers == 1 or len(todo) < 2:
        return [one(s) for s in todo]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, todo))


# ---------------------------------------------------------------------------
# student


def distill(
    labeled: Sequence[D.MultiModalScan],
    pseudo: Sequence[PseudoLabeledCase],
    student_cfg: NetConfig,
    train_cfg: TrainConfig,
    eval_ids: Collection[str] = (),
    checkpoint_dir: Optional[Union[str, Path]] = None,
) -> tuple[Network, TrainResult]:
    """Train a residual UNet (no VAE branch) on manual plus ensemble labels.

    Cases in ``eval_ids`` must not appear in either training set; their
    labels are never touched.
    """
    eval_ids = set(eval_ids)
    overlap = sorted(eval_ids & ({s.case_id for s in labeled} | {p.case_id for p in pseudo}))
    if overlap:
        raise ValueError(f"evaluation split overlaps training cases: {overlap}")
    if not labeled and not pseudo:
        raise ValueError("distillation dataset is empty")
    dataset = [TrainingCase.from_scan(s) for s in labeled]
    dataset += [TrainingCase.from_pseudo(p, hard=train_cfg.hard_labels) for p in pseudo]
    student = build_res_unet(student_cfg, seed=train_cfg.seed)
    result = train(student, dataset, train_cfg, checkpoint_dir=checkpoint_dir)
    return student, result
