"""On-disk slide bundles: a directory of pre-rendered pyramid levels.

A bundle holds `meta.json` plus one `level_<k>.png` per pyramid level, and
optionally planted ground truth (`truth.json`, `truth_0.png`) for synthetic
slides. `meta.json` schema:

    {"slide_id": str, "mpp": float,
     "levels": [{"index": int, "width": int, "height": int, "downsample": float}, ...]}

`mpp` is microns per pixel at level 0. Pixel buffers are numpy arrays of
shape (h, w, 3), dtype uint8, row-major RGB throughout the package.

Levels are independent stored rasters; nothing is resampled between levels at
read time. Decoded levels are cached in memory on first access (bundles are
desk-scale by design); concurrent region reads of a cached level are safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from threading import Lock

import numpy as np
from PIL import Image

from .errors import BoundsError, BundleFormatError, BundleIntegrityError

__all__ = ["SlideMeta", "SlideBundle", "open_bundle", "write_bundle", "make_thumbnail"]


@dataclass(frozen=True)
class SlideMeta:
    slide_id: str
    mpp: float
    level_dims: tuple  # ((w, h), ...) level 0 first
    level_downsamples: tuple  # floats, strictly increasing

    def __post_init__(self):
        if not self.slide_id:
            raise BundleFormatError("slide_id must be non-empty")
        if not (isinstance(self.mpp, float) and self.mpp > 0):
            raise BundleFormatError(f"mpp must be > 0, got {self.mpp!r}")
        if len(self.level_dims) == 0 or len(self.level_dims) != len(self.level_downsamples):
            raise BundleFormatError("levels must be non-empty and consistent")
        for w, h in self.level_dims:
            if w < 1 or h < 1:
                raise BundleFormatError("level dimensions must be positive")
        for (w0, h0), (w1, h1) in zip(self.level_dims, self.level_dims[1:]):
            if w1 > w0 or h1 > h0:
                raise BundleFormatError("level dimensions must be non-increasing")
        ds = self.level_downsamples
        if any(d <= 0 for d in ds) or any(b <= a for a, b in zip(ds, ds[1:])):
            raise BundleFormatError("level downsamples must be positive and strictly increasing")

    @property
    def n_levels(self) -> int:
        return len(self.level_dims)

    def to_json_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "mpp": self.mpp,
            "levels": [
                {"index": i, "width": w, "height": h, "downsample": d}
                for i, ((w, h), d) in enumerate(zip(self.level_dims, self.level_downsamples))
            ],
        }


def _meta_from_dict(data: dict) -> SlideMeta:
    try:
        levels = data["levels"]
        if not isinstance(levels, list) or not levels:
            raise BundleFormatError("meta.json: levels must be a non-empty list")
        by_index = sorted(levels, key=lambda lv: lv["index"])
        if [lv["index"] for lv in by_index] != list(range(len(by_index))):
            raise BundleFormatError("meta.json: level indexes must be 0..n-1")
        dims = tuple((int(lv["width"]), int(lv["height"])) for lv in by_index)
        downs = tuple(float(lv["downsample"]) for lv in by_index)
        return SlideMeta(
            slide_id=str(data["slide_id"]),
            mpp=float(data["mpp"]),
            level_dims=dims,
            level_downsamples=downs,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BundleFormatError(f"meta.json schema invalid: {e}") from e


class SlideBundle:
    """Open bundle handle; `read_region` returns exact stored pixels."""

    def __init__(self, path: Path, meta: SlideMeta):
        self.path = Path(path)
        self.meta = meta
        self._levels: dict[int, np.ndarray] = {}
        self._lock = Lock()

    def level_path(self, level: int) -> Path:
        return self.path / f"level_{level}.png"

    def _level_array(self, level: int) -> np.ndarray:
        with self._lock:
            arr = self._levels.get(level)
            if arr is None:
                img = Image.open(self.level_path(level)).convert("RGB")
                arr = np.asarray(img, dtype=np.uint8)
                arr.setflags(write=False)
                self._levels[level] = arr
            return arr

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        if not 0 <= level < self.meta.n_levels:
            raise ValueError(f"level {level} out of range")
        if w <= 0 or h <= 0:
            raise ValueError("region dimensions must be positive")
        lw, lh = self.meta.level_dims[level]
        if x < 0 or y < 0 or x + w > lw or y + h > lh:
            raise BoundsError(
                f"region ({x},{y},{w},{h}) outside level {level} of size {lw}x{lh}"
            )
        return self._level_array(level)[y:y + h, x:x + w].copy()

    def has_truth(self) -> bool:
        return (self.path / "truth.json").exists()


def open_bundle(path) -> SlideBundle:
    """Open and validate a bundle directory.

    Raises BundleFormatError for a bad meta.json, BundleIntegrityError when a
    level raster is missing or its size disagrees with the declared geometry.
    """
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise BundleFormatError(f"missing meta.json in {path}")
    try:
        data = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise BundleFormatError(f"cannot parse {meta_path}: {e}") from e
    if not isinstance(data, dict):
        raise BundleFormatError(f"{meta_path} must hold a JSON object")
    meta = _meta_from_dict(data)
    bundle = SlideBundle(path, meta)
    for level in range(meta.n_levels):
        lp = bundle.level_path(level)
        if not lp.is_file():
            raise BundleIntegrityError(f"missing raster {lp}")
        try:
            with Image.open(lp) as img:  # header only, no decode
                size = img.size
        except OSError as e:
            raise BundleIntegrityError(f"cannot read {lp}: {e}") from e
        if size != meta.level_dims[level]:
            raise BundleIntegrityError(
                f"{lp} is {size[0]}x{size[1]}, meta declares "
                f"{meta.level_dims[level][0]}x{meta.level_dims[level][1]}"
            )
    return bundle


def write_bundle(path, meta: SlideMeta, levels) -> Path:
    """Write meta.json + level rasters. `levels` are (h, w, 3) uint8 arrays."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if len(levels) != meta.n_levels:
        raise ValueError("level count disagrees with meta")
    for i, arr in enumerate(levels):
        w, h = meta.level_dims[i]
        if arr.shape != (h, w, 3):
            raise ValueError(f"level {i} array is {arr.shape}, meta declares {(h, w, 3)}")
        Image.fromarray(arr, mode="RGB").save(path / f"level_{i}.png")
    (path / "meta.json").write_text(json.dumps(meta.to_json_dict(), sort_keys=True, indent=1))
    return path


def make_thumbnail(bundle: SlideBundle, max_dim: int) -> tuple[np.ndarray, float]:
    """Box-filter thumbnail of level 0 with longest side <= max_dim.

    Target dims are floored after aspect-preserving scaling (minimum 1 px).
    Returns (buffer, scale_factor) with scale_factor = level0_longest /
    thumbnail_longest; 1.0 when level 0 already fits.
    """
    if max_dim < 1:
        raise ValueError("max_dim must be positive")
    w, h = bundle.meta.level_dims[0]
    level0 = bundle._level_array(0)
    longest = max(w, h)
    if longest <= max_dim:
        return level0.copy(), 1.0
    scale = longest / max_dim
    tw = max(1, int(w / scale))
    th = max(1, int(h / scale))
    img = Image.fromarray(level0, mode="RGB").resize((tw, th), Image.Resampling.BOX)
    return np.asarray(img, dtype=np.uint8), longest / max(tw, th)
