"""Monte-Carlo sweep: sampling ratio versus c-index stability.

Everything upstream of the subsample draw is deterministic given the config
seed, so each slide is enumerated, filtered, classified and quantified once
(all eligible patches), cached in memory keyed by (slide id, config hash),
and only the draw is rerandomized per (ratio, iteration). One sweep iteration
at (ratio r, iteration i) is exactly a pipeline run with sampling_ratio = r
and seed = hash(base_seed, r, i): the per-slide draw seeds derive the same
way run_pipeline derives them.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classify import classify_candidates, filter_relevant
from .config import PipelineConfig
from .errors import DataError
from .pipeline import BackendPool
from .pipeline import enumerate_slide
from .quantify import quantify_candidates
from .rng import derive_seed
from .sampling import subsample
from .survival import SurvivalRecord, concordance_index

__all__ = ["SweepRow", "DEFAULT_RATIOS", "ratio_sweep", "write_sweep_csv"]

DEFAULT_RATIOS = (0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)

SWEEP_COLUMNS = ("ratio", "c_index_mean", "c_index_sd", "avg_patches")


@dataclass(frozen=True)
class SweepRow:
    ratio: float
    c_index_mean: float
    c_index_sd: float
    avg_patch_count: float
    iterations: int

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError("ratio must be in (0, 1]")
        if self.c_index_sd < 0:
            raise ValueError("sd must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def _ratio_key(ratio: float) -> str:
    # seeds hash the 6-significant-digit decimal form, not the binary float
    return f"{ratio:.6g}"


def _expected_draw(ratio: float, n_eligible: int) -> int:
    return min(n_eligible, max(1, int(math.floor(ratio * n_eligible + 1e-9))))


def ratio_sweep(cfg: PipelineConfig, bundles, cohort_rows,
                ratios=DEFAULT_RATIOS, iterations: int = 100,
                base_seed: int | None = None, patients: dict | None = None,
                progress=None) -> list:
    """One SweepRow per ratio: mean/sd of the cohort c-index over iterations.

    cohort_rows are (patient_id, time_months, event, score) tuples; the score
    column is ignored (scores come from the pipeline itself). Slides with
    zero eligible patches are excluded with a warning. progress, if given,
    is called with a line of text after each ratio.
    """
    ratios = [float(r) for r in ratios]
    if not ratios or any(not 0.0 < r <= 1.0 for r in ratios):
        raise ValueError("ratios must be in (0, 1]")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    base_seed = cfg.seed if base_seed is None else int(base_seed)
    clinical = {pid: (tm, event) for pid, tm, event, _ in cohort_rows}

    # one-time per-slide cache: every eligible patch classified and quantified
    cache = {}  # (slide_id, config_hash) -> eligible candidate list
    cfg_hash = cfg.config_hash()
    slide_patient = {}
    with BackendPool(cfg.backend, cfg.seed) as pool:
        for b in bundles:
            sid = b.meta.slide_id
            pid = patients.get(sid, sid) if patients else sid
            if pid not in clinical:
                raise DataError(f"cohort CSV lacks patient {pid!r} (slide {sid})")
            cands = enumerate_slide(cfg, b)
            eligible = [c for c in cands if c.eligible]
            if not eligible:
                warnings.warn(f"slide {sid}: zero eligible patches, excluded from sweep")
                continue
            for c in eligible:
                c.sampled = True
            backend = pool.for_slide(b)
            classify_candidates(backend, b, eligible, workers=cfg.workers)
            quantify_candidates(backend, b, filter_relevant(eligible),
                                workers=cfg.workers, tolerate_failures=False)
            cache[(sid, cfg_hash)] = eligible
            slide_patient[sid] = pid
    if not cache:
        raise DataError("every slide was excluded: nothing to sweep")

    patient_slides: dict[str, list] = {}
    for (sid, _), eligible in sorted(cache.items()):
        patient_slides.setdefault(slide_patient[sid], []).append(eligible)

    rows = []
    for ratio in ratios:
        cvals = np.empty(iterations)
        for it in range(iterations):
            run_seed = derive_seed(base_seed, _ratio_key(ratio), it)
            records = []
            for pid, slides in patient_slides.items():
                slide_means = []
                for eligible in slides:
                    sid = eligible[0].slide_id
                    subsample(eligible, ratio, derive_seed(run_seed, "subsample", sid))
                    drawn = [c.density_mm2 for c in eligible
                             if c.sampled and c.density_mm2 is not None]
                    if drawn:
                        slide_means.append(sum(drawn) / len(drawn))
                if not slide_means:
                    continue  # no relevant patch drawn anywhere for this patient
                tm, event = clinical[pid]
                score = sum(slide_means) / len(slide_means)
                records.append(SurvivalRecord(pid, tm, event, -score))
            cvals[it] = concordance_index(records)
        avg_k = float(np.mean([_expected_draw(ratio, len(e))
                               for slides in patient_slides.values()
                               for e in slides]))
        row = SweepRow(ratio, float(np.mean(cvals)), float(np.std(cvals)),
                       avg_k, iterations)
        rows.append(row)
        if progress is not None:
            progress(f"ratio {ratio:g}: c-index {row.c_index_mean:.4f} "
                     f"+/- {row.c_index_sd:.4f}, avg {row.avg_patch_count:.1f} patches")
    return rows


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([f"{r.ratio:.6g}", f"{r.c_index_mean:.6g}",
                        f"{r.c_index_sd:.6g}", f"{r.avg_patch_count:.6g}"])
    return path
