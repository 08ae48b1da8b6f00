"""Static figure output: density heatmaps and class overlays on thumbnails.

Density color = colormap(min(d, clip) / clip) with clip defaulting to 10000
TILs/mm^2; everything at or above the clip renders identically. Patch
rectangles are mapped to thumbnail scale by dividing coordinates by the
scale factor and rounding half-up. Rendering is pure: same inputs, same
bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .taxonomy import PATCH_CLASSES

__all__ = [
    "ColorMap",
    "DEFAULT_COLORMAP",
    "CLASS_PALETTE",
    "render_heatmap",
    "render_class_overlay",
    "write_legend_json",
    "save_png",
]


@dataclass(frozen=True)
class ColorMap:
    """Piecewise-linear RGB ramp over [0, 1]."""

    stops: tuple  # ((fraction, (r, g, b)), ...) strictly increasing, 0..1

    def __post_init__(self):
        fr = [s[0] for s in self.stops]
        if len(fr) < 2 or fr[0] != 0.0 or fr[-1] != 1.0:
            raise ValueError("stops must start at 0 and end at 1")
        if any(a >= b for a, b in zip(fr, fr[1:])):
            raise ValueError("stop fractions must be strictly increasing")
        for _, rgb in self.stops:
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise ValueError("stops carry 8-bit RGB triples")

    def __call__(self, v: float) -> tuple:
        v = min(max(float(v), 0.0), 1.0)
        for (f0, c0), (f1, c1) in zip(self.stops, self.stops[1:]):
            if v <= f1:
                t = (v - f0) / (f1 - f0)
                return tuple(int(round(a + t * (b - a))) for a, b in zip(c0, c1))
        return tuple(int(c) for c in self.stops[-1][1])

    def to_json_list(self) -> list:
        return [[f, list(rgb)] for f, rgb in self.stops]


# blue -> yellow -> red ramp, low density cold, high density hot
DEFAULT_COLORMAP = ColorMap((
    (0.00, (5, 48, 97)),
    (0.25, (33, 144, 180)),
    (0.50, (250, 230, 80)),
    (0.75, (240, 120, 40)),
    (1.00, (165, 15, 21)),
))

CLASS_PALETTE = {
    "necrosis": (220, 30, 30),
    "stroma": (30, 180, 60),
    "normal_lung": (40, 70, 220),
    "tumor": (235, 215, 30),
}
assert set(CLASS_PALETTE) == set(PATCH_CLASSES)

_ALPHA = 0.6
# rounding can spill a rectangle past the thumbnail edge by a pixel or two
# with fractional scale factors; anything further means a scale mismatch
_EDGE_SLACK = 2


def _half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _thumb_rect(c, scale_factor: float, width: int, height: int):
    x0 = _half_up(c.x / scale_factor)
    y0 = _half_up(c.y / scale_factor)
    side = max(1, _half_up(c.patch_size / scale_factor))
    if (x0 < -_EDGE_SLACK or y0 < -_EDGE_SLACK
            or x0 + side > width + _EDGE_SLACK
            or y0 + side > height + _EDGE_SLACK):
        raise ValueError(
            f"patch ({c.x},{c.y}) size {c.patch_size} maps to "
            f"[{x0},{x0 + side})x[{y0},{y0 + side}) outside {width}x{height} "
            f"thumbnail: scale factor mismatch")
    return (max(0, x0), max(0, y0), min(width, x0 + side), min(height, y0 + side))


def _check_thumb(thumb) -> np.ndarray:
    t = np.asarray(thumb)
    if t.ndim != 3 or t.shape[2] != 3 or t.dtype != np.uint8:
        raise ValueError("thumbnail must be an HxWx3 uint8 buffer")
    return t


def _blend(out: np.ndarray, rect, rgb):
    x0, y0, x1, y1 = rect
    if x1 <= x0 or y1 <= y0:
        return
    region = out[y0:y1, x0:x1].astype(np.float64)
    color = np.array(rgb, dtype=np.float64)
    out[y0:y1, x0:x1] = np.clip(
        _ALPHA * color + (1.0 - _ALPHA) * region, 0, 255).astype(np.uint8)


def render_heatmap(thumb, candidates, scale_factor: float,
                   clip: float = 10000.0, colormap: ColorMap = DEFAULT_COLORMAP
                   ) -> np.ndarray:
    """Alpha-blend a filled rectangle per quantified patch over the thumbnail."""
    t = _check_thumb(thumb)
    if clip <= 0:
        raise ValueError("clip must be positive")
    out = t.copy()
    h, w = out.shape[:2]
    for c in candidates:
        if c.density_mm2 is None:
            continue
        rect = _thumb_rect(c, scale_factor, w, h)
        _blend(out, rect, colormap(min(c.density_mm2, clip) / clip))
    return out


def render_class_overlay(thumb, candidates, scale_factor: float) -> np.ndarray:
    """Outline every labeled candidate, fill the sampled ones.

    Palette: necrosis red, stroma green, normal_lung blue, tumor yellow.
    Unlabeled candidates are skipped.
    """
    t = _check_thumb(thumb)
    out = t.copy()
    h, w = out.shape[:2]
    for c in candidates:
        if c.class_label is None:
            continue
        rgb = CLASS_PALETTE[c.class_label]
        x0, y0, x1, y1 = _thumb_rect(c, scale_factor, w, h)
        if x1 <= x0 or y1 <= y0:
            continue
        if c.sampled:
            _blend(out, (x0, y0, x1, y1), rgb)
        color = np.array(rgb, dtype=np.uint8)
        out[y0, x0:x1] = color
        out[y1 - 1, x0:x1] = color
        out[y0:y1, x0] = color
        out[y0:y1, x1 - 1] = color
    return out


def write_legend_json(path, clip: float = 10000.0,
                      colormap: ColorMap = DEFAULT_COLORMAP) -> Path:
    path = Path(path)
    legend = {
        "clip": clip,
        "colormap": colormap.to_json_list(),
        "palette": {k: list(v) for k, v in CLASS_PALETTE.items()},
    }
    path.write_text(json.dumps(legend, sort_keys=True, indent=1))
    return path


def save_png(buf, path) -> Path:
    """Deterministic PNG write (no timestamps or ancillary chunks)."""
    path = Path(path)
    arr = np.asarray(buf)
    if arr.dtype != np.uint8:
        raise ValueError("expected a uint8 buffer")
    Image.fromarray(arr).save(path, format="PNG")
    return path
