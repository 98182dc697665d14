"""Three-step glyph preprocessing: invert, crop, normalize onto a 64x64 canvas."""

from __future__ import annotations

import math

import numpy as np

from .dataio import GrayImage

CANVAS = 64


class EmptyForegroundError(ValueError):
    pass


def invert(img: GrayImage) -> GrayImage:
    return GrayImage(255 - img.pixels)


def crop_foreground(img: GrayImage, threshold: int = 0) -> GrayImage:
    """Tightest box holding every pixel strictly brighter than ``threshold``."""
    mask = img.pixels > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyForegroundError("empty foreground: no pixel above threshold %d" % threshold)
    cols = np.flatnonzero(mask.any(axis=0))
    return GrayImage(img.pixels[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1])


def aspect_map(r: float) -> float:
    """Map a short/long side ratio through sqrt(sin(pi * r / 2))."""
    if not 0.0 < r <= 1.0:
        raise ValueError(f"aspect ratio must lie in (0, 1], got {r}")
    return math.sqrt(math.sin(math.pi * r / 2.0))


def _resample_axis(size_in: int, size_out: int):
    # pixel-center mapping, clamped at the borders
    src = (np.arange(size_out, dtype=np.float64) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, size_in - 1)
    return lo, hi, src - lo


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    src = np.asarray(pixels, dtype=np.float64)
    r0, r1, fr = _resample_axis(src.shape[0], out_h)
    c0, c1, fc = _resample_axis(src.shape[1], out_w)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bottom * fr[:, None]


def glyph_box(height: int, width: int) -> tuple[int, int]:
    """Size (rows, cols) the glyph occupies on the canvas after normalization."""
    long_side, short_side = max(height, width), min(height, width)
    short_out = int(round(CANVAS * aspect_map(short_side / long_side)))
    short_out = max(1, min(CANVAS, short_out))
    if height >= width:
        return CANVAS, short_out
    return short_out, CANVAS


def normalize(img: GrayImage) -> np.ndarray:
    """Scale a cropped, inverted glyph into a centered 64x64 float32 canvas in [0, 1].

    The long side fills the canvas and the short side is set by
    :func:`aspect_map`. A single-pixel glyph has no extent to scale and is
    placed as one cell at the canvas center.
    """
    canvas = np.zeros((CANVAS, CANVAS), dtype=np.float32)
    if not np.any(img.pixels):
        raise EmptyForegroundError("empty foreground: nothing to normalize")
    h, w = img.height, img.width
    if h == 1 and w == 1:
        c = (CANVAS - 1) // 2
        canvas[c, c] = img.pixels[0, 0] / 255.0
        return canvas
    bh, bw = glyph_box(h, w)
    scaled = resize_bilinear(img.pixels, bh, bw) / 255.0
    top = (CANVAS - bh) // 2
    left = (CANVAS - bw) // 2
    canvas[top : top + bh, left : left + bw] = np.clip(scaled, 0.0, 1.0)
    return canvas


def preprocess(img: GrayImage, threshold: int = 0) -> np.ndarray:
    return normalize(crop_foreground(invert(img), threshold))


def is_normalized(x: np.ndarray) -> bool:
    x = np.asarray(x)
    return (
        x.shape == (CANVAS, CANVAS)
        and x.dtype == np.float32
        and bool(np.all(np.isfinite(x)))
        and float(x.min()) >= 0.0
        and float(x.max()) <= 1.0
    )
