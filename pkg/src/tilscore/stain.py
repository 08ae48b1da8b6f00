"""Hematoxylin/eosin/DAB color deconvolution and the cellularity filter.

Pixels are converted to optical density per channel,

    OD_c = -log10(max(I_c, 1) / 255),

then unmixed against a 3x3 stain matrix whose rows are the unit-norm OD
vectors of hematoxylin, eosin and DAB:

    (h, e, d) = OD . M^-1        so that        OD = (h, e, d) . M.

The default vectors are the classic ones measured by Ruifrok and Johnston:
H = (0.65, 0.70, 0.29), E = (0.07, 0.99, 0.11), D = (0.27, 0.57, 0.78),
row-normalized. A patch is considered cellular enough to keep when its mean
hematoxylin concentration reaches a threshold (default 0.017), evaluated on a
box-downsampled copy whose longest side is `eval_dim` pixels.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = [
    "StainMatrix",
    "DEFAULT_STAIN_MATRIX",
    "rgb_to_hed",
    "hed_to_rgb",
    "hematoxylin_mean",
    "passes_h_filter",
]


class StainMatrix:
    """Row-normalized 3x3 stain OD matrix with its cached inverse."""

    def __init__(self, rows):
        m = np.asarray(rows, dtype=np.float64).reshape(3, 3)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("stain matrix rows must be nonzero")
        m = m / norms
        self.matrix = m
        try:
            self.inverse = np.linalg.inv(m)
        except np.linalg.LinAlgError as e:
            raise ValueError("stain matrix is singular") from e

    @classmethod
    def from_flat(cls, values) -> "StainMatrix":
        values = list(values)
        if len(values) != 9:
            raise ValueError("expected 9 values, row-major 3x3")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))


DEFAULT_STAIN_MATRIX = StainMatrix(
    [[0.65, 0.70, 0.29],
     [0.07, 0.99, 0.11],
     [0.27, 0.57, 0.78]]
)


def _check_rgb(buf) -> np.ndarray:
    arr = np.asarray(buf)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("expected an (h, w, 3) uint8 RGB buffer")
    return arr


def rgb_to_hed(buf, matrix: StainMatrix | None = None) -> np.ndarray:
    """Unmix an RGB uint8 buffer into per-pixel (h, e, d) concentrations.

    Returns float64 of the same spatial shape. Zero intensity is clamped to 1
    before the log so black maps to finite density log10(255) per channel.
    """
    arr = _check_rgb(buf)
    m = matrix or DEFAULT_STAIN_MATRIX
    od = -np.log10(np.maximum(arr, 1).astype(np.float64) / 255.0)
    return od @ m.inverse


def hed_to_rgb(hed, matrix: StainMatrix | None = None) -> np.ndarray:
    """Recompose concentrations to RGB uint8: I_c = round(255 * 10^-OD_c).

    Values are clamped to [0, 255]; negative concentrations saturate at 255.
    """
    conc = np.asarray(hed, dtype=np.float64)
    if conc.shape[-1] != 3:
        raise ValueError("expected trailing dimension of 3 (h, e, d)")
    m = matrix or DEFAULT_STAIN_MATRIX
    od = conc @ m.matrix
    intensity = np.round(255.0 * np.power(10.0, -od))
    return np.clip(intensity, 0, 255).astype(np.uint8)


def _box_downsample_to(arr: np.ndarray, eval_dim: int) -> np.ndarray:
    h, w = arr.shape[:2]
    longest = max(h, w)
    if longest <= eval_dim:
        return arr
    scale = longest / eval_dim
    tw = max(1, int(w / scale))
    th = max(1, int(h / scale))
    img = Image.fromarray(arr, mode="RGB").resize((tw, th), Image.Resampling.BOX)
    return np.asarray(img)


def hematoxylin_mean(buf, eval_dim: int = 96, matrix: StainMatrix | None = None) -> float:
    """Mean hematoxylin concentration of a patch.

    The patch is box-downsampled so its longest side is `eval_dim` (skipped
    when already smaller) before unmixing; downsampling first makes the filter
    cheap without moving the mean.
    """
    if eval_dim < 1:
        raise ValueError("eval_dim must be positive")
    arr = _check_rgb(buf)
    small = _box_downsample_to(arr, eval_dim)
    hed = rgb_to_hed(small, matrix)
    return float(np.mean(hed[..., 0]))


def passes_h_filter(buf, threshold: float = 0.017, eval_dim: int = 96,
                    matrix: StainMatrix | None = None) -> bool:
    """True when mean hematoxylin >= threshold (threshold 0 keeps everything)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return hematoxylin_mean(buf, eval_dim=eval_dim, matrix=matrix) >= threshold
