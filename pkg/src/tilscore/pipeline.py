"""End-to-end orchestration: sample -> classify -> quantify -> score.

Every stage persists its state to the per-slide candidate CSV and the next
stage reads it back, so running the stages as separate commands over the same
output directory is byte-identical to one `run` invocation: `run` itself goes
through the very same files. All randomness flows from the single config
seed; per-slide streams are derived by hashing the purpose and slide id onto
it, which keeps results independent of slide order and worker count.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

from ._version import __version__
from .backends import HttpBackend, MockBackend, SubprocessBackend, parse_backend_descriptor
from .classify import classify_candidates, filter_relevant
from .config import PipelineConfig
from .errors import CsvParseError, DataError, NoQuantifiedPatchesError
from .quantify import multi_slide_score, quantify_candidates
from .rng import derive_seed
from .sampling import (enumerate_candidates, filter_by_hematoxylin,
                       load_candidates, persist_candidates, subsample)
from .slide_io import SlideBundle, make_thumbnail, open_bundle
from .synthetic import load_truth
from .tissue import binarize_thumbnail, extract_largest_contour, project_to_level0
from .viz import render_class_overlay, render_heatmap, save_png, write_legend_json

__all__ = [
    "discover_bundles",
    "BackendPool",
    "enumerate_slide",
    "sample_slide",
    "candidates_path",
    "stage_sample",
    "stage_classify",
    "stage_quantify",
    "stage_score",
    "stage_heatmaps",
    "read_patients_csv",
    "RunManifest",
    "run_pipeline",
    "SCORE_COLUMNS",
]

# one row per (patient, slide); d_patient is the patient's multi-slide score,
# repeated on each of that patient's slide rows
SCORE_COLUMNS = ("patient_id", "slide_id", "n_patches", "d_patient")


def discover_bundles(paths) -> list[SlideBundle]:
    """Open bundle directories, or directories of bundles; sorted by slide id."""
    found = []
    for p in paths:
        p = Path(p)
        if (p / "meta.json").is_file():
            found.append(open_bundle(p))
        elif p.is_dir():
            subs = sorted(q for q in p.iterdir() if (q / "meta.json").is_file())
            if not subs:
                raise DataError(f"no slide bundles under {p}")
            found.extend(open_bundle(q) for q in subs)
        else:
            raise DataError(f"{p} is neither a slide bundle nor a directory of bundles")
    if not found:
        raise DataError("no slide bundles given")
    found.sort(key=lambda b: b.meta.slide_id)
    for a, b in zip(found, found[1:]):
        if a.meta.slide_id == b.meta.slide_id:
            raise DataError(f"duplicate slide id {a.meta.slide_id!r}")
    return found


class BackendPool:
    """Backends per slide: mock is truth-seeded per slide, wire clients shared.

    The subprocess/HTTP protocols multiplex requests by patch id, so a single
    client serves every slide and worker. Mock answers are pure functions of
    (planted truth, config seed, patch coordinates), which is what makes
    artifacts independent of iteration order and worker count.
    """

    def __init__(self, descriptor: str, base_seed: int):
        self.kind, self.arg = parse_backend_descriptor(descriptor)
        self.base_seed = int(base_seed)
        self._shared = None

    def for_slide(self, bundle: SlideBundle):
        if self.kind == "mock":
            if not bundle.has_truth():
                raise DataError(
                    f"slide {bundle.meta.slide_id}: mock backend requires "
                    f"truth.json in the bundle")
            return MockBackend(load_truth(bundle),
                               derive_seed(self.base_seed, "mock", bundle.meta.slide_id))
        if self._shared is None:
            if self.kind == "subprocess":
                self._shared = SubprocessBackend(self.arg)
            else:
                self._shared = HttpBackend(self.arg)
        return self._shared

    def close(self):
        if self._shared is not None:
            self._shared.close()
            self._shared = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def enumerate_slide(cfg: PipelineConfig, bundle: SlideBundle):
    """Tissue mask -> contour -> grid candidates -> cellularity flags.

    Deterministic (no subsampling); every candidate carries h_mean/eligible.
    """
    thumb, scale = make_thumbnail(bundle, cfg.thumbnail_max_dim)
    mask = binarize_thumbnail(thumb)
    poly = extract_largest_contour(mask)
    poly0 = project_to_level0(poly, scale, bundle.meta)
    cands = enumerate_candidates(bundle.meta, poly0, cfg)
    return filter_by_hematoxylin(bundle, cands, cfg, workers=cfg.workers)


def sample_slide(cfg: PipelineConfig, bundle: SlideBundle):
    """enumerate_slide plus the seeded subsample draw for this slide."""
    cands = enumerate_slide(cfg, bundle)
    return subsample(cands, cfg.sampling_ratio,
                     derive_seed(cfg.seed, "subsample", bundle.meta.slide_id))


def candidates_path(out_dir, slide_id: str) -> Path:
    return Path(out_dir) / f"candidates_{slide_id}.csv"


def _load_stage_csv(out_dir, slide_id: str):
    path = candidates_path(out_dir, slide_id)
    if not path.is_file():
        raise DataError(f"missing {path.name}: run the sample stage first")
    return load_candidates(path)


def stage_sample(cfg: PipelineConfig, bundles, out_dir) -> dict:
    counts = {}
    for b in bundles:
        cands = sample_slide(cfg, b)
        persist_candidates(cands, candidates_path(out_dir, b.meta.slide_id))
        counts[b.meta.slide_id] = {
            "total": len(cands),
            "eligible": sum(c.eligible for c in cands),
            "sampled": sum(c.sampled for c in cands),
        }
    return counts


def stage_classify(cfg: PipelineConfig, bundles, out_dir, pool: BackendPool) -> dict:
    counts = {}
    for b in bundles:
        sid = b.meta.slide_id
        cands = _load_stage_csv(out_dir, sid)
        classify_candidates(pool.for_slide(b), b, cands, workers=cfg.workers)
        persist_candidates(cands, candidates_path(out_dir, sid))
        counts[sid] = {
            "classified": sum(c.class_label is not None for c in cands),
            "relevant": len(filter_relevant(cands)),
        }
    return counts


def stage_quantify(cfg: PipelineConfig, bundles, out_dir, pool: BackendPool) -> dict:
    counts = {}
    for b in bundles:
        sid = b.meta.slide_id
        cands = _load_stage_csv(out_dir, sid)
        relevant = filter_relevant(cands)
        quantify_candidates(pool.for_slide(b), b, relevant,
                            workers=cfg.workers,
                            tolerate_failures=cfg.tolerate_failures)
        persist_candidates(cands, candidates_path(out_dir, sid))
        quantified = sum(c.density_mm2 is not None for c in relevant)
        counts[sid] = {
            "relevant": len(relevant),
            "quantified": quantified,
            "failed": len(relevant) - quantified,
        }
    return counts


def read_patients_csv(path) -> dict:
    """slide_id -> patient_id mapping CSV with exactly those two columns."""
    path = Path(path)
    mapping = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["slide_id", "patient_id"]:
            raise CsvParseError(f"{path}: expected header slide_id,patient_id")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise CsvParseError(f"{path}:{lineno}: expected 2 fields")
            sid, pid = row[0].strip(), row[1].strip()
            if not sid or not pid:
                raise CsvParseError(f"{path}:{lineno}: empty id")
            if sid in mapping:
                raise CsvParseError(f"{path}:{lineno}: duplicate slide_id {sid!r}")
            mapping[sid] = pid
    return mapping


def stage_score(cfg: PipelineConfig, bundles, out_dir, patients: dict | None = None) -> dict:
    """Aggregate patch densities into patient scores and write scores.csv.

    A slide with zero quantified patches is an error: silently scoring 0
    would corrupt downstream survival analysis.
    """
    out_dir = Path(out_dir)
    per_patient: dict[str, list] = {}
    for b in bundles:
        sid = b.meta.slide_id
        cands = _load_stage_csv(out_dir, sid)
        dens = [c.density_mm2 for c in cands if c.density_mm2 is not None]
        if not dens:
            raise NoQuantifiedPatchesError(f"slide {sid} has no quantified patches")
        pid = patients.get(sid, sid) if patients else sid
        per_patient.setdefault(pid, []).append((sid, dens))
    scores = {pid: multi_slide_score([d for _, d in slides])
              for pid, slides in per_patient.items()}
    with (out_dir / "scores.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for pid in sorted(scores):
            for sid, dens in sorted(per_patient[pid]):
                w.writerow([pid, sid, len(dens), f"{scores[pid]:.6g}"])
    return scores


def stage_heatmaps(cfg: PipelineConfig, bundles, out_dir) -> list:
    """Density heatmap and class overlay per slide, plus the legend sidecar."""
    out_dir = Path(out_dir)
    artifacts = [write_legend_json(out_dir / "legend.json", clip=cfg.clip_density).name]
    for b in bundles:
        sid = b.meta.slide_id
        cands = _load_stage_csv(out_dir, sid)
        thumb, scale = make_thumbnail(b, cfg.thumbnail_max_dim)
        heat = render_heatmap(thumb, cands, scale, clip=cfg.clip_density)
        over = render_class_overlay(thumb, cands, scale)
        artifacts.append(save_png(heat, out_dir / f"heatmap_{sid}.png").name)
        artifacts.append(save_png(over, out_dir / f"overlay_{sid}.png").name)
    return artifacts


@dataclass
class RunManifest:
    """Machine-readable record of one pipeline run."""

    version: str
    seed: int
    backend: str
    config: dict
    config_hash: str
    stage_durations: dict
    slides: dict
    artifacts: list

    def validate(self):
        """Count chain per slide: total >= eligible >= sampled >= relevant >= quantified."""
        for sid, c in self.slides.items():
            chain = [c["total"], c["eligible"], c["sampled"], c["relevant"],
                     c["quantified"]]
            if any(v < 0 for v in chain):
                raise ValueError(f"slide {sid}: negative count")
            if any(a < b for a, b in zip(chain, chain[1:])):
                raise ValueError(f"slide {sid}: count chain violated: {c}")
            if c["relevant"] != c["quantified"] + c.get("failed", 0):
                raise ValueError(f"slide {sid}: relevant != quantified + failed")

    def to_json_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "backend": self.backend,
            "config": self.config,
            "config_hash": self.config_hash,
            "stage_durations": self.stage_durations,
            "slides": self.slides,
            "artifacts": self.artifacts,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))
        return path


def run_pipeline(cfg: PipelineConfig, bundles, out_dir,
                 patients: dict | None = None, heatmaps: bool = True) -> RunManifest:
    """All stages through the persisted CSVs, then the manifest.

    Identical (config, seed, slides) reproduce byte-identical CSV/PNG
    artifacts; worker count influences only the recorded durations.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    durations = {}
    slides: dict[str, dict] = {}

    t0 = time.perf_counter()
    for sid, c in stage_sample(cfg, bundles, out_dir).items():
        slides.setdefault(sid, {}).update(c)
    durations["sample"] = time.perf_counter() - t0

    with BackendPool(cfg.backend, cfg.seed) as pool:
        t0 = time.perf_counter()
        for sid, c in stage_classify(cfg, bundles, out_dir, pool).items():
            slides[sid].update(c)
        durations["classify"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        for sid, c in stage_quantify(cfg, bundles, out_dir, pool).items():
            slides[sid].update(c)
        durations["quantify"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    stage_score(cfg, bundles, out_dir, patients)
    durations["score"] = time.perf_counter() - t0

    artifacts = [candidates_path(out_dir, sid).name for sid in sorted(slides)]
    artifacts.append("scores.csv")
    if heatmaps:
        t0 = time.perf_counter()
        artifacts += stage_heatmaps(cfg, bundles, out_dir)
        durations["heatmap"] = time.perf_counter() - t0

    manifest = RunManifest(
        version=__version__,
        seed=cfg.seed,
        backend=cfg.backend,
        config=cfg.snapshot(),
        config_hash=cfg.config_hash(),
        stage_durations=durations,
        slides=slides,
        artifacts=sorted(artifacts),
    )
    manifest.validate()
    manifest.write(out_dir / "manifest.json")
    return manifest
