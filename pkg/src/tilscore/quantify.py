"""TIL counting, density normalization, patient scores, segmentation metrics.

A patch's TIL density converts an inflammatory-nucleus count into cells per
square millimeter of scanned tissue:

    density = count / (patch_size_px * mpp)^2 * 1e6

(the denominator is the patch area in square microns). A patient's score is
the mean density over their relevant patches; with several slides per patient
the per-slide means are averaged (mean of means, not a pooled mean), so every
slide weighs equally regardless of patch count.

Segmentation quality uses the standard trio: DICE = 2TP/(2TP+FP+FN) over
pixels, IoU summed over images before dividing, and panoptic quality
PQ = sum(matched IoUs) / (TP + FP/2 + FN/2) with instances matched at
IoU > 0.5 (matching happens upstream; only the formulas live here).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import CellInstance, make_patch_id
from .errors import (NoQuantifiedPatchesError, PartialFailureError,
                     UndefinedMetricError)
from .sampling import Candidate, sig6
from .slide_io import SlideBundle
from .taxonomy import TIL_CLASS

__all__ = [
    "til_count",
    "patch_density",
    "patient_score",
    "multi_slide_score",
    "quantify_candidates",
    "dice_score",
    "iou_score",
    "pq_score",
    "SegmentationEval",
]


def til_count(cells) -> int:
    """Number of inflammatory instances among detected cells."""
    return sum(1 for c in cells if c.cell_class == TIL_CLASS)


def patch_density(count: int, patch_size: int, mpp: float) -> float:
    """TILs per mm^2 for a square patch of patch_size pixels at mpp microns/px."""
    if count < 0:
        raise ValueError("count must be >= 0")
    if patch_size <= 0 or mpp <= 0:
        raise ValueError("patch_size and mpp must be positive")
    side_um = patch_size * mpp
    return count / (side_um * side_um) * 1e6


def patient_score(densities) -> float:
    """Mean TIL density over one patient's relevant patches (one slide)."""
    d = list(densities)
    if not d:
        raise NoQuantifiedPatchesError("patient has no quantified patches")
    return float(np.mean(d))


def multi_slide_score(per_slide_densities) -> float:
    """Mean of per-slide mean densities; empty slides or cohorts are errors."""
    slides = [list(s) for s in per_slide_densities]
    if not slides:
        raise NoQuantifiedPatchesError("patient has no slides with quantified patches")
    means = []
    for s in slides:
        if not s:
            raise NoQuantifiedPatchesError("a slide has no quantified patches")
        means.append(float(np.mean(s)))
    return float(np.mean(means))


def quantify_candidates(backend, bundle: SlideBundle, relevant: list[Candidate],
                        workers: int = 1, tolerate_failures: bool = False) -> list[Candidate]:
    """Attach til_count and density_mm2 to each relevant candidate, in order.

    `relevant` is the filter_relevant output (sampled, stroma/tumor). Failures
    are collected per candidate; unless tolerated, the whole call fails with
    the list attached rather than silently dropping patches.
    """
    mpp = bundle.meta.mpp

    def one(c: Candidate):
        buf = bundle.read_region(0, c.x, c.y, c.patch_size, c.patch_size)
        cells = backend.quantify(make_patch_id(c.slide_id, c.x, c.y), buf, mpp)
        return til_count(cells)

    def safe(c: Candidate):
        try:
            return one(c), None
        except Exception as e:  # noqa: BLE001 - failures are reported, not hidden
            return None, e

    if workers > 1 and len(relevant) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(safe, relevant))
    else:
        results = [safe(c) for c in relevant]
    failures = []
    for c, (count, err) in zip(relevant, results):
        if err is not None:
            failures.append((make_patch_id(c.slide_id, c.x, c.y), err))
            continue
        c.til_count = count
        c.density_mm2 = sig6(patch_density(count, c.patch_size, mpp))
    if failures and not tolerate_failures:
        listing = "; ".join(f"{pid}: {err}" for pid, err in failures)
        raise PartialFailureError(f"{len(failures)} patch(es) failed: {listing}", failures)
    return relevant


# ------------------------------------------------------- segmentation metrics

def dice_score(tp: int, fp: int, fn: int) -> float:
    """Pixel DICE = 2TP / (2TP + FP + FN)."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be >= 0")
    denom = 2 * tp + fp + fn
    if denom == 0:
        raise UndefinedMetricError("DICE undefined when every count is zero")
    return 2 * tp / denom


def iou_score(intersections, unions) -> float:
    """Dataset IoU: intersections and unions are summed before dividing."""
    inter = list(intersections)
    union = list(unions)
    if len(inter) != len(union) or not inter:
        raise ValueError("need matching non-empty intersection/union lists")
    if any(v < 0 for v in inter) or any(v < 0 for v in union):
        raise ValueError("counts must be >= 0")
    if any(i > u for i, u in zip(inter, union)):
        raise ValueError("intersection cannot exceed union")
    total_union = sum(union)
    if total_union == 0:
        raise UndefinedMetricError("IoU undefined on empty unions")
    return sum(inter) / total_union


def pq_score(matched_ious, tp: int, fp: int, fn: int) -> float:
    """Panoptic quality over instances matched at IoU > 0.5.

    tp must equal the number of matched pairs; each matched IoU is in (0.5, 1].
    """
    ious = [float(v) for v in matched_ious]
    if min(fp, fn) < 0 or tp < 0:
        raise ValueError("counts must be >= 0")
    if tp != len(ious):
        raise ValueError("tp must equal the number of matched instance pairs")
    if any(not 0.5 < v <= 1.0 for v in ious):
        raise ValueError("matched IoUs must lie in (0.5, 1]")
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        raise UndefinedMetricError("PQ undefined without instances")
    return sum(ious) / denom


@dataclass(frozen=True)
class SegmentationEval:
    """Bundle of segmentation metrics for one evaluation run."""

    tp: int
    fp: int
    fn: int
    dice: float
    iou: float
    pq: float
    matched_ious: tuple

    def __post_init__(self):
        if self.tp != len(self.matched_ious):
            raise ValueError("tp must equal the number of matched IoUs")
        if any(not 0.5 < v <= 1.0 for v in self.matched_ious):
            raise ValueError("matched IoUs must lie in (0.5, 1]")

    def to_json_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "dice": self.dice, "iou": self.iou, "pq": self.pq,
            "matched_ious": list(self.matched_ious),
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))
        return path
