"""Per-case Dice evaluation and report files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import data as D
from .losses import (
    RegionSummary,
    format_summary,
    labels_to_regions,
    region_dice,
    regions_to_labels,
    summarize_metrics,
    write_boxplot_csv,
    write_case_csv,
)


@dataclass
class EvalReport:
    method: str
    rows: list[tuple[str, dict[str, float]]]
    summary: dict[str, RegionSummary]

    def mean(self, region: str) -> float:
        return self.summary[region].mean


def evaluate_cases(
    predict: Callable[[np.ndarray], np.ndarray],
    scans: Sequence[D.MultiModalScan],
    method: str = "model",
) -> EvalReport:
    """Dice per region per case.

    ``predict`` maps a preprocessed (4,D,H,W) image to region probabilities;
    these go through the label map and back before scoring, as a submitted
    segmentation would.
    """
    rows = []
    for scan in scans:
        if scan.labels is None:
            raise ValueError(f"{scan.case_id}: evaluation case has no manual labels")
        probs = predict(D.preprocess(scan))
        pred = labels_to_regions(regions_to_labels(probs, 0.5))
        rows.append((scan.case_id, region_dice(pred, labels_to_regions(scan.labels))))
    return EvalReport(method, rows, summarize_metrics([d for _, d in rows]))


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "per_case": out / "per_case.csv",
        "summary": out / "summary.txt",
        "boxplot": out / "boxplot.csv",
    }
    write_case_csv(paths["per_case"], report.rows)
    paths["summary"].write_text(format_summary(report.method, report.summary), encoding="utf-8")
    write_boxplot_csv(paths["boxplot"], report.summary)
    return paths
