"""Value types and deterministic arithmetic for points, boxes, masks, and rasters.

Boxes are half-open integer pixel rectangles [x0, x1) x [y0, y1).
Rasters are row-major with pixel (x, y) stored at array[y, x].
All types are immutable values and all operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBox, DimensionMismatch, PointOutOfBounds


def _round_half_away(v: float) -> int:
    """Round half away from zero (not banker's rounding)."""
    if v >= 0.0:
        return int(math.floor(v + 0.5))
    return int(math.ceil(v - 0.5))


@dataclass(frozen=True)
class BBox:
    """Half-open pixel box [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self!r}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0

    @property
    def center_pixel(self) -> tuple[int, int]:
        """Integer center pixel: floor midpoint of the inclusive pixel range."""
        return (self.x0 + self.x1 - 1) // 2, (self.y0 + self.y1 - 1) // 2

    def contains_point(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1


@dataclass(frozen=True)
class PointPrompt:
    """A class-tagged pixel location."""

    x: int
    y: int
    class_id: int


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image2D:
    """Single-channel raster with intensities in [0, 1] and isotropic
    physical spacing in mm per pixel."""

    pixels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be a 2D raster, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "pixels", _freeze(arr.copy()))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def contains(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height


@dataclass(frozen=True)
class Mask2D:
    """Binary raster; dimensions must match its paired image."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be a 2D raster, got shape {arr.shape}")
        object.__setattr__(self, "bits", _freeze(arr.astype(bool).copy()))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "Mask2D":
        return cls(np.zeros((height, width), dtype=bool))


def clip_box(b: BBox, width: int, height: int) -> BBox | None:
    """Intersect a box with the image rectangle; None when empty."""
    x0 = max(b.x0, 0)
    y0 = max(b.y0, 0)
    x1 = min(b.x1, width)
    y1 = min(b.y1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def seed_box_from_point(p: PointPrompt, seed_w: int, seed_h: int, img: Image2D) -> BBox:
    """Box of nominal size seed_w x seed_h centered on the prompt, clipped
    to the image. Always contains the prompt pixel."""
    if seed_w < 1 or seed_h < 1:
        raise ValueError("seed size must be at least 1x1")
    if not img.contains(p.x, p.y):
        raise PointOutOfBounds(f"point ({p.x}, {p.y}) outside {img.width}x{img.height} image")
    x0 = p.x - seed_w // 2
    y0 = p.y - seed_h // 2
    clipped = clip_box(BBox(x0, y0, x0 + seed_w, y0 + seed_h), img.width, img.height)
    assert clipped is not None  # the prompt pixel is always retained
    return clipped


def scale_box(b: BBox, s: float, img: Image2D) -> BBox:
    """Rescale a box about its (possibly fractional) center.

    New dimensions are max(1, round(dim * s)); the new start is
    round(center - dim'/2); both use round-half-away-from-zero. The result
    is clipped to the image.
    """
    if not s > 0:
        raise ValueError("scale must be positive")
    w = max(1, _round_half_away(b.width * s))
    h = max(1, _round_half_away(b.height * s))
    cx, cy = b.center
    x0 = _round_half_away(cx - w / 2.0)
    y0 = _round_half_away(cy - h / 2.0)
    clipped = clip_box(BBox(x0, y0, x0 + w, y0 + h), img.width, img.height)
    if clipped is None:
        raise DegenerateBox(f"scaling {b} by {s} left nothing inside the image")
    return clipped


def tight_box(m: Mask2D) -> BBox | None:
    """Minimal box containing every true bit; None for an all-false mask."""
    rows = np.flatnonzero(m.bits.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(m.bits.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union by pixel area."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union


def crop_resize(img: Image2D, b: BBox, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of the box region onto a fixed out_h x out_w grid.

    Output sample i (column) reads the image at x = x0 + (i+0.5)*w/out_w - 0.5
    in pixel-center coordinates (same for rows); interpolation neighbors are
    clamped to the image edges.
    """
    if clip_box(b, img.width, img.height) != b:
        raise ValueError(f"box {b} not contained in {img.width}x{img.height} image")
    if out_w < 1 or out_h < 1:
        raise ValueError("output grid must be at least 1x1")
    sx = b.x0 + (np.arange(out_w, dtype=np.float64) + 0.5) * (b.width / out_w) - 0.5
    sy = b.y0 + (np.arange(out_h, dtype=np.float64) + 0.5) * (b.height / out_h) - 0.5
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    wx = sx - x0f
    wy = sy - y0f
    xi0 = np.clip(x0f.astype(np.int64), 0, img.width - 1)
    xi1 = np.clip(x0f.astype(np.int64) + 1, 0, img.width - 1)
    yi0 = np.clip(y0f.astype(np.int64), 0, img.height - 1)
    yi1 = np.clip(y0f.astype(np.int64) + 1, 0, img.height - 1)
    px = img.pixels
    top = px[np.ix_(yi0, xi0)] * (1.0 - wx) + px[np.ix_(yi0, xi1)] * wx
    bot = px[np.ix_(yi1, xi0)] * (1.0 - wx) + px[np.ix_(yi1, xi1)] * wx
    return top * (1.0 - wy)[:, None] + bot * wy[:, None]


def mask_intersect_box(m: Mask2D, b: BBox) -> Mask2D:
    """Keep only the true bits inside the box."""
    if not (0 <= b.x0 and 0 <= b.y0 and b.x1 <= m.width and b.y1 <= m.height):
        raise DimensionMismatch(f"box {b} not contained in {m.width}x{m.height} mask")
    out = np.zeros_like(m.bits)
    out[b.y0:b.y1, b.x0:b.x1] = m.bits[b.y0:b.y1, b.x0:b.x1]
    return Mask2D(out)
