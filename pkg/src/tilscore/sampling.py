"""Semi-stochastic patch sampling.

Candidates come from a non-overlapping grid (stride = patch size) anchored at
the top-left of the tissue polygon's bounding box; a grid cell becomes a
candidate when at least `coverage_min` of its area falls inside the polygon
(area measured by rasterizing the polygon at 1/16-cell resolution with the
even-odd rule) and the cell lies fully inside level 0. The cellularity filter
then flags each candidate eligible or not (never deletes), and the subsampler
marks exactly max(1, floor(ratio * n_eligible)) eligible candidates as
sampled using a partial Fisher-Yates shuffle driven by the PCG64 stream.

Candidate lists round-trip through a fixed-column CSV; real values carry six
significant digits (they are quantized at computation time so persistence is
lossless and re-runs over persisted files reproduce in-memory results
byte for byte).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import CsvParseError
from .rng import Pcg64Stream
from .slide_io import SlideBundle, SlideMeta
from .stain import StainMatrix, hematoxylin_mean
from .taxonomy import PATCH_CLASSES
from .tissue import Polygon

__all__ = [
    "Candidate",
    "sig6",
    "enumerate_candidates",
    "filter_by_hematoxylin",
    "subsample",
    "persist_candidates",
    "load_candidates",
    "CSV_COLUMNS",
]

CSV_COLUMNS = (
    "slide_id", "x", "y", "patch_size", "h_mean", "eligible", "sampled",
    "class_label", "p_necrosis", "p_stroma", "p_normal", "p_tumor",
    "til_count", "density_mm2",
)

_RASTER_SUBDIV = 16  # polygon raster samples per cell edge


def sig6(value: float) -> float:
    """Quantize to 6 significant digits (the CSV real-number precision)."""
    return float(f"{float(value):.6g}")


@dataclass
class Candidate:
    """One grid patch at level 0 and everything the pipeline learned about it."""

    slide_id: str
    x: int
    y: int
    patch_size: int
    h_mean: float | None = None
    eligible: bool = False
    sampled: bool = False
    class_label: str | None = None
    class_probs: tuple | None = None  # aligned with PATCH_CLASSES
    til_count: int | None = None
    density_mm2: float | None = None


def _rasterize_rows(poly: Polygon, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon for a sample grid, one scanline at a time."""
    v = poly.vertices
    x1 = v[:, 0]
    y1 = v[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    out = np.zeros((len(ys), len(xs)), dtype=bool)
    for j, y in enumerate(ys):
        # half-open rule at vertices avoids double counting crossings
        hits = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
        if not hits.any():
            continue
        t = (y - y1[hits]) / (y2[hits] - y1[hits])
        cross = np.sort(x1[hits] + t * (x2[hits] - x1[hits]))
        idx = np.searchsorted(cross, xs, side="right")
        out[j] = (idx % 2) == 1
    return out


def enumerate_candidates(meta: SlideMeta, polygon: Polygon,
                         cfg: PipelineConfig) -> list[Candidate]:
    """Grid cells over the polygon's bounding box with enough tissue coverage.

    Cells are disjoint, stride = patch_size, anchored at the floor of the
    bbox top-left; cells extending past level 0 are dropped regardless of
    coverage.
    """
    if polygon.space != "level0":
        raise ValueError("polygon must be in level0 space")
    patch = cfg.patch_size
    slide_w, slide_h = meta.level_dims[0]
    min_x, min_y, max_x, max_y = polygon.bbox()
    ox, oy = int(math.floor(min_x)), int(math.floor(min_y))
    cols = [x for x in range(ox, int(math.ceil(max_x)), patch) if x + patch <= slide_w]
    rows = [y for y in range(oy, int(math.ceil(max_y)), patch) if y + patch <= slide_h]
    if not cols or not rows:
        return []
    step = patch / _RASTER_SUBDIV
    xs = np.concatenate([x + (np.arange(_RASTER_SUBDIV) + 0.5) * step for x in cols])
    out: list[Candidate] = []
    for y in rows:
        ys = y + (np.arange(_RASTER_SUBDIV) + 0.5) * step
        inside = _rasterize_rows(polygon, xs, ys)
        per_cell = inside.reshape(_RASTER_SUBDIV, len(cols), _RASTER_SUBDIV)
        coverage = per_cell.mean(axis=(0, 2))
        for i, x in enumerate(cols):
            if coverage[i] >= cfg.coverage_min - 1e-12:
                out.append(Candidate(slide_id=meta.slide_id, x=x, y=y, patch_size=patch))
    return out


def filter_by_hematoxylin(bundle: SlideBundle, candidates: list[Candidate],
                          cfg: PipelineConfig, workers: int = 1) -> list[Candidate]:
    """Set h_mean and the eligibility flag on every candidate, in order.

    No candidate is removed. h_mean is quantized to 6 significant digits and
    eligibility compares the quantized value, so a reload from CSV reproduces
    the very same flags.
    """
    matrix = StainMatrix.from_flat(cfg.stain_matrix) if cfg.stain_matrix else None

    def one(c: Candidate) -> float:
        buf = bundle.read_region(0, c.x, c.y, c.patch_size, c.patch_size)
        return hematoxylin_mean(buf, eval_dim=cfg.eval_dim, matrix=matrix)

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            means = list(pool.map(one, candidates))
    else:
        means = [one(c) for c in candidates]
    for c, m in zip(candidates, means):
        c.h_mean = sig6(m)
        c.eligible = c.h_mean >= cfg.h_threshold
        c.sampled = False
    return candidates


def subsample(candidates: list[Candidate], ratio: float, seed: int) -> list[Candidate]:
    """Mark exactly max(1, floor(ratio * n_eligible)) candidates sampled.

    Zero eligible candidates yield zero sampled. The draw is a partial
    Fisher-Yates over the eligible indexes using rejection-sampled bounded
    integers from the PCG64 raw stream, so it reproduces across platforms for
    a given (candidate order, ratio, seed). The tiny floor guard compensates
    for decimal ratios that are not exactly representable in binary.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio!r}")
    for c in candidates:
        c.sampled = False
    eligible_idx = [i for i, c in enumerate(candidates) if c.eligible]
    n = len(eligible_idx)
    if n == 0:
        return candidates
    k = min(n, max(1, int(math.floor(ratio * n + 1e-9))))
    stream = Pcg64Stream(seed)
    arr = list(eligible_idx)
    for i in range(k):
        j = i + stream.bounded(n - i)
        arr[i], arr[j] = arr[j], arr[i]
    for i in arr[:k]:
        candidates[i].sampled = True
    return candidates


def _fmt_real(v) -> str:
    return "" if v is None else f"{float(v):.6g}"


def _fmt_int(v) -> str:
    return "" if v is None else str(int(v))


def persist_candidates(candidates: list[Candidate], path) -> Path:
    """Write the fixed-column CSV (header mandatory, booleans as 0/1)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for c in candidates:
            probs = c.class_probs if c.class_probs is not None else (None,) * 4
            w.writerow([
                c.slide_id, c.x, c.y, c.patch_size, _fmt_real(c.h_mean),
                int(c.eligible), int(c.sampled), c.class_label or "",
                _fmt_real(probs[0]), _fmt_real(probs[1]),
                _fmt_real(probs[2]), _fmt_real(probs[3]),
                _fmt_int(c.til_count), _fmt_real(c.density_mm2),
            ])
    return path


def _parse(row: dict, line: int) -> Candidate:
    def real(col):
        s = row[col]
        return None if s == "" else float(s)

    def boolean(col):
        s = row[col]
        if s not in ("0", "1"):
            raise CsvParseError(f"line {line}: {col} must be 0 or 1, got {s!r}")
        return s == "1"

    try:
        x = int(row["x"])
        y = int(row["y"])
        patch = int(row["patch_size"])
    except ValueError as e:
        raise CsvParseError(f"line {line}: {e}") from e
    if x < 0 or y < 0:
        raise CsvParseError(f"line {line}: negative patch origin ({x}, {y})")
    if patch < 1:
        raise CsvParseError(f"line {line}: patch_size must be positive")
    eligible = boolean("eligible")
    sampled = boolean("sampled")
    if sampled and not eligible:
        raise CsvParseError(f"line {line}: sampled row must be eligible")
    label = row["class_label"] or None
    if label is not None and label not in PATCH_CLASSES:
        raise CsvParseError(f"line {line}: unknown class_label {label!r}")
    try:
        probs_raw = tuple(real(f"p_{k}") for k in ("necrosis", "stroma", "normal", "tumor"))
        til = row["til_count"]
        til = None if til == "" else int(til)
        density = real("density_mm2")
        h_mean = real("h_mean")
    except ValueError as e:
        raise CsvParseError(f"line {line}: {e}") from e
    have = [p is not None for p in probs_raw]
    if any(have) and not all(have):
        raise CsvParseError(f"line {line}: class probabilities must be all present or all absent")
    if (til is None) != (density is None):
        raise CsvParseError(f"line {line}: til_count and density_mm2 must appear together")
    if til is not None and til < 0:
        raise CsvParseError(f"line {line}: til_count must be >= 0")
    return Candidate(
        slide_id=row["slide_id"], x=x, y=y, patch_size=patch, h_mean=h_mean,
        eligible=eligible, sampled=sampled, class_label=label,
        class_probs=probs_raw if all(have) else None,
        til_count=til, density_mm2=density,
    )


def load_candidates(path) -> list[Candidate]:
    """Read a candidate CSV; malformed content raises CsvParseError with a line number."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise CsvParseError(f"{path}: empty file, header required") from None
            if tuple(header) != CSV_COLUMNS:
                raise CsvParseError(f"{path}: bad header {header!r}")
            out = []
            for line, fields in enumerate(reader, start=2):
                if len(fields) != len(CSV_COLUMNS):
                    raise CsvParseError(f"line {line}: expected {len(CSV_COLUMNS)} fields, got {len(fields)}")
                out.append(_parse(dict(zip(CSV_COLUMNS, fields)), line))
            return out
    except OSError as e:
        raise CsvParseError(f"cannot read {path}: {e}") from e
