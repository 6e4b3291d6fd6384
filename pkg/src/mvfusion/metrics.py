"""Region-level overlap metrics for tumor segmentations.

Labels follow the usual five-class coding: 0 everything else, 1 necrosis,
2 edema, 3 non-enhancing tumor, 4 enhancing tumor.  Evaluation groups
them into three nested regions: complete {1,2,3,4}, core {1,3,4}, and
enhancing {4}.  Dice is 2|GT & AT| / (|GT| + |AT|); when both masks are
empty the region is counted as a perfect match (dice 1.0).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch
from .volume import LabelVolume


@dataclass(frozen=True)
class RegionSpec:
    """A named group of label classes evaluated together."""

    name: str
    classes: frozenset[int]

    def __post_init__(self):
        if not self.classes:
            raise ValueError("region must contain at least one class")


COMPLETE = RegionSpec("complete", frozenset({1, 2, 3, 4}))
CORE = RegionSpec("core", frozenset({1, 3, 4}))
ENHANCING = RegionSpec("enhancing", frozenset({4}))
REGIONS = (COMPLETE, CORE, ENHANCING)


def region_mask(labels: LabelVolume, region: RegionSpec) -> np.ndarray:
    """Boolean mask of voxels whose label belongs to the region."""
    return np.isin(labels.data, sorted(region.classes))


@dataclass(frozen=True)
class RegionScore:
    """Dice plus the voxel counts it was computed from."""

    dice: float
    gt_voxels: int
    pred_voxels: int
    overlap: int

    def __post_init__(self):
        if min(self.gt_voxels, self.pred_voxels, self.overlap) < 0:
            raise ValueError("voxel counts must be nonnegative")
        denom = self.gt_voxels + self.pred_voxels
        expected = 1.0 if denom == 0 else 2.0 * self.overlap / denom
        if abs(self.dice - expected) > 1e-12:
            raise ValueError(f"dice {self.dice} inconsistent with counts")


def dice(gt: LabelVolume, pred: LabelVolume, region: RegionSpec) -> float:
    """Dice overlap of one region between ground truth and a prediction."""
    return _score(gt, pred, region).dice


def _score(gt: LabelVolume, pred: LabelVolume, region: RegionSpec) -> RegionScore:
    if gt.dims != pred.dims:
        raise DimMismatch(f"ground truth {gt.dims} vs prediction {pred.dims}")
    m_gt = region_mask(gt, region)
    m_pred = region_mask(pred, region)
    n_gt = int(m_gt.sum())
    n_pred = int(m_pred.sum())
    overlap = int((m_gt & m_pred).sum())
    d = 1.0 if n_gt + n_pred == 0 else 2.0 * overlap / (n_gt + n_pred)
    return RegionScore(dice=d, gt_voxels=n_gt, pred_voxels=n_pred, overlap=overlap)


@dataclass(frozen=True)
class DiceReport:
    """Per-region scores for one case."""

    complete: RegionScore
    core: RegionScore
    enhancing: RegionScore

    def by_region(self) -> dict[str, RegionScore]:
        return {"complete": self.complete, "core": self.core, "enhancing": self.enhancing}

    def mean_dice(self) -> float:
        return (self.complete.dice + self.core.dice + self.enhancing.dice) / 3.0


def evaluate(gt: LabelVolume, pred: LabelVolume) -> DiceReport:
    """Score a prediction against ground truth on all three regions."""
    return DiceReport(
        complete=_score(gt, pred, COMPLETE),
        core=_score(gt, pred, CORE),
        enhancing=_score(gt, pred, ENHANCING),
    )


CSV_HEADER = ("case_id", "method", "complete", "core", "enhancing")


def report_row(case_id: str, method: str, report: DiceReport) -> tuple[str, ...]:
    """One CSV row with dice values at 6-decimal fixed point."""
    return (
        case_id,
        method,
        f"{report.complete.dice:.6f}",
        f"{report.core.dice:.6f}",
        f"{report.enhancing.dice:.6f}",
    )


def write_report_csv(path, entries) -> None:
    """Write (case_id, method, DiceReport) triples as a CSV with header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for case_id, method, report in entries:
            writer.writerow(report_row(case_id, method, report))
