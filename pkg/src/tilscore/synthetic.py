"""Synthetic slide bundles with planted, machine-readable ground truth.

Regions are axis-aligned rectangles painted in order (later rectangles win)
over a near-white background. Region colors are synthesized as hematoxylin /
eosin concentrations and rendered through the package's own stain recomposition,
so the generator is calibrated against the deconvolution module by
construction: background lands well below the cellularity threshold, tumor and
stroma land well above it with a hematoxylin intensity that tracks the planted
TIL density.

Truth is persisted next to the rasters: `truth.json` holds the density field
as rectangles {x, y, w, h, class, density_per_mm2} at level 0 (plus the
generator seed and the inflammatory share), `truth_0.png` the rasterized
class-index map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BundleFormatError
from .rng import generator_from
from .slide_io import SlideBundle, SlideMeta, write_bundle
from .stain import DEFAULT_STAIN_MATRIX, hed_to_rgb
from .taxonomy import CELL_CLASSES, REGION_CLASSES

__all__ = [
    "REGION_CLASSES",
    "CELL_CLASSES",
    "RegionSpec",
    "SyntheticSpec",
    "GroundTruthMap",
    "generate_synthetic_slide",
    "load_truth",
]

_BACKGROUND_GRAY = 251
_NOISE_SIGMA = 0.004
_STRIP_ROWS = 256


@dataclass(frozen=True)
class RegionSpec:
    x: int
    y: int
    w: int
    h: int
    region_class: str
    density_per_mm2: float = 0.0

    def __post_init__(self):
        if self.region_class not in REGION_CLASSES:
            raise ValueError(f"unknown region class {self.region_class!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("region dimensions must be positive")
        if self.x < 0 or self.y < 0:
            raise ValueError("region origin must be non-negative")
        if self.density_per_mm2 < 0:
            raise ValueError("density must be >= 0")


@dataclass(frozen=True)
class SyntheticSpec:
    slide_id: str
    width: int
    height: int
    mpp: float
    regions: tuple = ()
    level_downsamples: tuple = (1.0, 4.0)
    til_share: float = 1.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("slide dimensions must be positive")
        if self.mpp <= 0:
            raise ValueError("mpp must be positive")
        if not 0.0 <= self.til_share <= 1.0:
            raise ValueError("til_share must be in [0, 1]")
        for r in self.regions:
            if r.x + r.w > self.width or r.y + r.h > self.height:
                raise ValueError(f"region {r} exceeds slide bounds")


def _tint(region_class: str, density: float) -> tuple[float, float]:
    """(hematoxylin, eosin) concentrations for a region class."""
    track = 0.04 * density / 1000.0
    if region_class == "necrosis":
        return 0.08, 0.30
    if region_class == "stroma":
        return 0.10 + track, 0.15
    if region_class == "normal_lung":
        return 0.10, 0.05
    if region_class == "tumor":
        return 0.14 + track, 0.10
    raise ValueError(f"no tint for {region_class!r}")


def _background_concentration() -> np.ndarray:
    od = -np.log10(_BACKGROUND_GRAY / 255.0)
    return od * np.ones(3) @ DEFAULT_STAIN_MATRIX.inverse


class GroundTruthMap:
    """Planted truth: piecewise-constant class and TIL-density fields.

    `class_map` / `density_map` rasterize the rectangles at level 0 on first
    use (painted in order, later rectangles override earlier ones).
    """

    def __init__(self, width: int, height: int, mpp: float, regions,
                 seed: int = 0, til_share: float = 1.0):
        self.width = int(width)
        self.height = int(height)
        self.mpp = float(mpp)
        self.regions = tuple(regions)
        self.seed = int(seed)
        self.til_share = float(til_share)
        self._class_map: np.ndarray | None = None
        self._density_map: np.ndarray | None = None

    def class_map(self) -> np.ndarray:
        """(h, w) uint8 of REGION_CLASSES indices at level 0."""
        if self._class_map is None:
            m = np.zeros((self.height, self.width), dtype=np.uint8)
            for r in self.regions:
                m[r.y:r.y + r.h, r.x:r.x + r.w] = REGION_CLASSES.index(r.region_class)
            self._class_map = m
        return self._class_map

    def density_map(self) -> np.ndarray:
        """(h, w) float32 planted TIL density (per mm^2) at level 0."""
        if self._density_map is None:
            m = np.zeros((self.height, self.width), dtype=np.float32)
            for r in self.regions:
                m[r.y:r.y + r.h, r.x:r.x + r.w] = r.density_per_mm2
            self._density_map = m
        return self._density_map

    def _check_patch(self, x: int, y: int, w: int, h: int):
        if w <= 0 or h <= 0:
            raise ValueError("patch dimensions must be positive")
        if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise ValueError(f"patch ({x},{y},{w},{h}) outside truth coverage")

    def class_counts(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Pixel counts per region class under a level-0 patch."""
        self._check_patch(x, y, w, h)
        window = self.class_map()[y:y + h, x:x + w]
        return np.bincount(window.ravel(), minlength=len(REGION_CLASSES))

    def majority_tissue_class(self, x: int, y: int, w: int, h: int) -> str | None:
        """Majority non-background class under the patch; None if all background.

        Ties break toward the lower class index.
        """
        counts = self.class_counts(x, y, w, h)
        counts = counts[1:]  # drop background
        if counts.sum() == 0:
            return None
        return REGION_CLASSES[1 + int(np.argmax(counts))]

    def expected_til_count(self, x: int, y: int, w: int, h: int) -> float:
        """Integral of the planted density over the patch, in cells."""
        self._check_patch(x, y, w, h)
        px_area_mm2 = (self.mpp / 1000.0) ** 2
        window = self.density_map()[y:y + h, x:x + w]
        return float(window.sum(dtype=np.float64) * px_area_mm2)

    def background_fraction(self) -> float:
        return float(np.mean(self.class_map() == 0))

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "til_share": self.til_share,
            "regions": [
                {"x": r.x, "y": r.y, "w": r.w, "h": r.h,
                 "class": r.region_class, "density_per_mm2": r.density_per_mm2}
                for r in self.regions
            ],
        }


def _render_level0(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Render the level-0 raster strip by strip with seeded concentration noise."""
    bg = _background_concentration()
    conc = np.empty((spec.height, spec.width, 3), dtype=np.float32)
    conc[:] = bg.astype(np.float32)
    for r in spec.regions:
        h_c, e_c = _tint(r.region_class, r.density_per_mm2)
        conc[r.y:r.y + r.h, r.x:r.x + r.w] = np.float32([h_c, e_c, 0.0])
    rng = generator_from(seed, "render", spec.slide_id)
    out = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    for y0 in range(0, spec.height, _STRIP_ROWS):
        y1 = min(y0 + _STRIP_ROWS, spec.height)
        strip = conc[y0:y1].astype(np.float64)
        strip += rng.normal(0.0, _NOISE_SIGMA, size=strip.shape)
        out[y0:y1] = hed_to_rgb(strip)
    return out


def generate_synthetic_slide(spec: SyntheticSpec, seed: int, out_dir) -> Path:
    """Write a bundle for `spec` under `out_dir/<slide_id>` and return its path.

    Deterministic: the same (spec, seed) produce byte-identical bundles.
    """
    level0 = _render_level0(spec, seed)
    dims = [(spec.width, spec.height)]
    levels = [level0]
    for d in spec.level_downsamples[1:]:
        w = max(1, int(spec.width / d))
        h = max(1, int(spec.height / d))
        img = Image.fromarray(level0, mode="RGB").resize((w, h), Image.Resampling.BOX)
        dims.append((w, h))
        levels.append(np.asarray(img, dtype=np.uint8))
    meta = SlideMeta(
        slide_id=spec.slide_id,
        mpp=spec.mpp,
        level_dims=tuple(dims),
        level_downsamples=tuple(float(d) for d in spec.level_downsamples),
    )
    path = Path(out_dir) / spec.slide_id
    write_bundle(path, meta, levels)
    truth = GroundTruthMap(spec.width, spec.height, spec.mpp, spec.regions,
                           seed=seed, til_share=spec.til_share)
    (path / "truth.json").write_text(json.dumps(truth.to_json_dict(), sort_keys=True, indent=1))
    Image.fromarray(truth.class_map(), mode="L").save(path / "truth_0.png")
    return path


def load_truth(bundle: SlideBundle) -> GroundTruthMap:
    """Load planted truth for a bundle; raises BundleFormatError if absent/bad."""
    truth_path = bundle.path / "truth.json"
    if not truth_path.is_file():
        raise BundleFormatError(f"bundle {bundle.path} carries no truth.json")
    try:
        data = json.loads(truth_path.read_text())
        regions = tuple(
            RegionSpec(x=int(r["x"]), y=int(r["y"]), w=int(r["w"]), h=int(r["h"]),
                       region_class=str(r["class"]),
                       density_per_mm2=float(r["density_per_mm2"]))
            for r in data["regions"]
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise BundleFormatError(f"cannot parse {truth_path}: {e}") from e
    w, h = bundle.meta.level_dims[0]
    for r in regions:
        if r.x + r.w > w or r.y + r.h > h:
            raise BundleFormatError(f"truth region {r} exceeds slide bounds")
    return GroundTruthMap(w, h, bundle.meta.mpp, regions,
                          seed=int(data.get("seed", 0)),
                          til_share=float(data.get("til_share", 1.0)))
