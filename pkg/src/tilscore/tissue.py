"""Thumbnail-scale tissue localization.

Binarization thresholds the HSV saturation channel with Otsu's method and
cleans the mask with a single 3x3 majority vote. The largest 8-connected
foreground component (ties broken by topmost-leftmost starting pixel) is
traced with Moore boundary following into a polygon over thumbnail pixel
centers; holes inside the contour are intentionally kept (the downstream
cellularity filter rejects empty interior patches). Only the largest
component is used, so slides whose tissue splits into several distant
fragments keep just the biggest one.

Masks are boolean (h, w) arrays; polygons are float (n, 2) vertex arrays in
(x, y) order tagged with the coordinate space they live in. One-pixel-wide
appendages are traversed out and back, producing doubled-back zero-area edges
rather than a strictly simple polygon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyTissueError
from .slide_io import SlideMeta

__all__ = [
    "Polygon",
    "saturation_channel",
    "otsu_threshold",
    "binarize_thumbnail",
    "majority_filter",
    "extract_largest_contour",
    "project_to_level0",
    "polygon_area",
]


@dataclass(frozen=True)
class Polygon:
    vertices: np.ndarray  # (n, 2) float64, (x, y)
    space: str  # "thumbnail" | "level0"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        object.__setattr__(self, "vertices", v)
        if self.space not in ("thumbnail", "level0"):
            raise ValueError(f"unknown coordinate space {self.space!r}")

    def bbox(self) -> tuple[float, float, float, float]:
        v = self.vertices
        return (float(v[:, 0].min()), float(v[:, 1].min()),
                float(v[:, 0].max()), float(v[:, 1].max()))


def polygon_area(poly: Polygon) -> float:
    """Unsigned shoelace area."""
    v = poly.vertices
    x, y = v[:, 0], v[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def saturation_channel(buf) -> np.ndarray:
    """HSV saturation in [0, 1]: (max - min) / max, zero for black pixels."""
    arr = np.asarray(buf)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 RGB buffer")
    f = arr.astype(np.float64)
    mx = f.max(axis=2)
    mn = f.min(axis=2)
    return np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)


def otsu_threshold(values, bins: int = 256) -> float:
    """Otsu's threshold over a 256-bin histogram of values in [0, 1].

    Returns the upper edge of the bin maximizing inter-class variance (first
    such bin on ties); callers treat values strictly above it as foreground.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty input")
    hist, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(bins))
    mu_t = mu[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma_b = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    return float(edges[int(np.argmax(sigma_b)) + 1])


def majority_filter(mask) -> np.ndarray:
    """3x3 majority vote with edge replication; >= 5 of 9 keeps a pixel on."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    p = np.pad(m.astype(np.int16), 1, mode="edge")
    s = sum(p[dy:dy + m.shape[0], dx:dx + m.shape[1]]
            for dy in range(3) for dx in range(3))
    return s >= 5


def binarize_thumbnail(buf) -> np.ndarray:
    """Tissue mask: Otsu on saturation, then one 3x3 majority pass."""
    s = saturation_channel(buf)
    return majority_filter(s > otsu_threshold(s))


# Moore neighborhood clockwise from west, y pointing down:
#            W        NW       N       NE      E       SE      S       SW
_MOORE = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_DIR_OF = {d: i for i, d in enumerate(_MOORE)}


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise EmptyTissueError("no foreground component in mask")
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    best = int(areas.max())
    tied = np.flatnonzero(areas == best)
    if len(tied) > 1:
        flat = labels.ravel()
        keep = min(tied, key=lambda lab: int(np.argmax(flat == lab)))
    else:
        keep = tied[0]
    return labels == keep


def _trace_moore(comp: np.ndarray) -> np.ndarray:
    """Moore boundary following over pixel centers of one 8-connected component.

    The walk state is (current pixel, last background neighbor); it starts at
    the topmost-leftmost pixel entered from the west and stops when that exact
    state recurs (equivalent to Jacob's stopping criterion).
    """
    h, w = comp.shape
    ys, xs = np.nonzero(comp)
    first = np.lexsort((xs, ys))[0]
    start = (int(xs[first]), int(ys[first]))

    def fg(p):
        return 0 <= p[0] < w and 0 <= p[1] < h and comp[p[1], p[0]]

    state0 = (start, (start[0] - 1, start[1]))  # west neighbor is background
    cur, last_bg = state0
    contour = []
    # the walk is deterministic, so a repeated start-pixel state closes the loop
    seen_at_start = {state0}
    limit = 8 * comp.size + 8
    while True:
        contour.append(cur)
        start_d = _DIR_OF[(last_bg[0] - cur[0], last_bg[1] - cur[1])]
        nxt = None
        lb = last_bg
        for _ in range(8):
            cand = (cur[0] + _MOORE[start_d][0], cur[1] + _MOORE[start_d][1])
            if fg(cand):
                nxt = cand
                break
            lb = cand
            start_d = (start_d + 1) % 8
        if nxt is None:
            break  # isolated pixel
        cur, last_bg = nxt, lb
        if cur == start:
            if (cur, last_bg) in seen_at_start:
                break
            seen_at_start.add((cur, last_bg))
        if len(contour) > limit:
            raise RuntimeError("boundary tracing failed to terminate")
    return np.asarray(contour, dtype=np.float64)


def _simplify_collinear(verts: np.ndarray) -> np.ndarray:
    """Drop vertices interior to straight runs (closed-polygon pass)."""
    n = len(verts)
    if n <= 3:
        return verts
    keep = []
    for i in range(n):
        a, b, c = verts[i - 1], verts[i], verts[(i + 1) % n]
        ab = b - a
        bc = c - b
        cross = ab[0] * bc[1] - ab[1] * bc[0]
        if not (cross == 0 and np.dot(ab, bc) > 0):
            keep.append(i)
    if len(keep) < 3:
        return verts
    return verts[keep]


def extract_largest_contour(mask) -> Polygon:
    """Boundary polygon of the largest 8-connected component, thumbnail space.

    Raises EmptyTissueError on an all-background mask. Components tracing to
    fewer than 3 distinct centers (1-2 pixels) expand to the enclosing
    pixel-corner rectangle so the polygon stays valid.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2-D")
    if not m.any():
        raise EmptyTissueError("mask has no foreground")
    verts = _trace_moore(_largest_component(m))
    if len(np.unique(verts, axis=0)) < 3:
        x0, y0 = verts.min(axis=0)
        x1, y1 = verts.max(axis=0)
        verts = np.asarray([[x0 - 0.5, y0 - 0.5], [x1 + 0.5, y0 - 0.5],
                            [x1 + 0.5, y1 + 0.5], [x0 - 0.5, y1 + 0.5]])
    else:
        verts = _simplify_collinear(verts)
    return Polygon(vertices=verts, space="thumbnail")


def project_to_level0(poly: Polygon, scale_factor: float, meta: SlideMeta) -> Polygon:
    """Affine-scale a thumbnail polygon into level-0 pixels, clamped to bounds."""
    if poly.space != "thumbnail":
        raise ValueError("expected a thumbnail-space polygon")
    if scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    w, h = meta.level_dims[0]
    v = poly.vertices * float(scale_factor)
    v[:, 0] = np.clip(v[:, 0], 0.0, float(w))
    v[:, 1] = np.clip(v[:, 1], 0.0, float(h))
    return Polygon(vertices=v, space="level0")
