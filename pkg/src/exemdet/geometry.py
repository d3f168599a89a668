"""Geometric substrate shared by every stage: images, boxes, IoU, NMS,
integral images, and bilinear crop-resize.

Boxes are center-based and real-valued; corner coordinates are always
derived, never stored. Pixel (i, j) occupies the unit square
[i, i+1] x [j, j+1] and its center sits at (i + 0.5, j + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# ITU-R 601 luma weights for RGB -> gray.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class EmptyCropError(ValueError):
    """Crop box does not intersect the source image."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center (cx, cy) plus strictly positive size, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(map(math.isfinite, vals)) or self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"invalid box: cx={self.cx} cy={self.cy} w={self.w} h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "Box":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def clip(self, width: float, height: float) -> "Box | None":
        """Intersect with [0, width] x [0, height]; None when the overlap is empty."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(width)), min(self.y1, float(height))
        if x0 >= x1 or y0 >= y1:
            return None
        return Box.from_corners(x0, y0, x1, y1)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.cx + dx, self.cy + dy, self.w, self.h)


@dataclass(frozen=True)
class Image:
    """Pixel raster, shape (height, width, channels in {1, 3}), float32 in [0, 1].

    A 2-d array passed to the constructor is treated as single-channel.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixel array, got shape {np.shape(self.pixels)}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValueError("empty image")
        if not np.isfinite(px).all():
            raise ValueError("pixel values must be finite")
        if float(px.min()) < 0.0 or float(px.max()) > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class DensityMap:
    """Per-pixel similarity intensities, shape (height, width), float32 in [0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"expected a 2-d value grid, got shape {np.shape(self.values)}")
        if not np.isfinite(v).all() or float(v.min()) < 0.0 or float(v.max()) >= 1.0:
            raise ValueError("density values must be finite and lie in [0, 1)")
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class IntegralImage:
    """(height+1, width+1) float64 table; entry [j, i] sums all pixels above-left of (i, j)."""

    table: np.ndarray

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1


@dataclass(frozen=True)
class Detection:
    """A located object: box, category identifier, confidence in [0, 1]."""

    box: Box
    category: str | int
    score: float


@dataclass(frozen=True)
class GtObject:
    """One annotated ground-truth object."""

    box: Box
    category: str | int


def to_gray(img: Image) -> np.ndarray:
    """(h, w) float64 luma plane; single-channel images pass through."""
    px = img.pixels.astype(np.float64)
    if img.channels == 1:
        return px[:, :, 0]
    return px @ GRAY_WEIGHTS


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]; 0 for disjoint or touching boxes."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # Areas from the same derived corners keep iou(a, a) == 1 exactly despite
    # the rounding in corner derivation; the clamp covers the last ulp.
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    return min(1.0, inter / (area_a + area_b - inter))


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy descending-score suppression, applied per category.

    Returns survivors in descending score order; no two survivors of the same
    category overlap above `iou_threshold`. Ties keep input order.
    """
    if any(not math.isfinite(d.score) for d in dets):
        raise ValueError("detection scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    keep: list[Detection] = []
    for i in order:
        d = dets[i]
        if any(k.category == d.category and iou(k.box, d.box) > iou_threshold for k in keep):
            continue
        keep.append(d)
    return keep


def integral_build(dmap: DensityMap) -> IntegralImage:
    """Prefix-sum table enabling O(1) rectangle sums over the density map."""
    h, w = dmap.values.shape
    table = np.zeros((h + 1, w + 1), dtype=np.float64)
    table[1:, 1:] = np.cumsum(np.cumsum(dmap.values.astype(np.float64), axis=0), axis=1)
    return IntegralImage(table)


def _member_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    # Half-open index range of pixels whose centers fall strictly inside (lo, hi),
    # clipped to [0, n]. Centers exactly on a box edge are excluded.
    start = math.floor(lo - 0.5) + 1
    stop = math.ceil(hi - 0.5)
    return max(start, 0), min(stop, n)


def box_pixel_span(b: Box, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer footprint (x0, x1, y0, y1), half-open, of the box clipped to the grid."""
    x0, x1 = _member_span(b.x0, b.x1, width)
    y0, y1 = _member_span(b.y0, b.y1, height)
    return x0, x1, y0, y1


def box_pixel_count(b: Box, width: int, height: int) -> int:
    """Number of member pixels: centers strictly inside the clipped box."""
    x0, x1, y0, y1 = box_pixel_span(b, width, height)
    return max(0, x1 - x0) * max(0, y1 - y0)


def box_sum(ii: IntegralImage, b: Box) -> float:
    """Sum of map values over the member pixels of the clipped box; 0 if none."""
    x0, x1, y0, y1 = box_pixel_span(b, ii.width, ii.height)
    if x0 >= x1 or y0 >= y1:
        return 0.0
    t = ii.table
    return float(t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0])


def _bilinear_sample(pixels: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample (h, w, c) pixels at continuous coordinates.

    Points outside the image domain [0, w] x [0, h] read exactly 0; points
    inside are bilinear in the pixel centers, with edge clamping inside the
    outermost half-pixel ring (so constant images stay constant).
    """
    h, w = pixels.shape[:2]
    inside = (sx >= 0.0) & (sx <= w) & (sy >= 0.0) & (sy <= h)
    cx = np.clip(sx, 0.5, w - 0.5) - 0.5
    cy = np.clip(sy, 0.5, h - 0.5) - 0.5
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (cx - x0)[..., None]
    ty = (cy - y0)[..., None]
    v = ((1.0 - tx) * (1.0 - ty) * pixels[y0, x0]
         + tx * (1.0 - ty) * pixels[y0, x1]
         + (1.0 - tx) * ty * pixels[y1, x0]
         + tx * ty * pixels[y1, x1])
    return v * inside[..., None]


def crop_resize_batch(img: Image, boxes: list[Box], out_w: int, out_h: int) -> np.ndarray:
    """(n, out_h, out_w, channels) float32 stack of bilinear crops.

    Boxes may extend past the image; uncovered area reads 0. Boxes fully
    outside produce all-zero crops (no error, unlike crop_resize).
    """
    n = len(boxes)
    if n == 0:
        return np.zeros((0, out_h, out_w, img.channels), dtype=np.float32)
    px = img.pixels.astype(np.float64)
    x0s = np.array([b.x0 for b in boxes])[:, None, None]
    y0s = np.array([b.y0 for b in boxes])[:, None, None]
    ws = np.array([b.w for b in boxes])[:, None, None]
    hs = np.array([b.h for b in boxes])[:, None, None]
    gx = (np.arange(out_w, dtype=np.float64) + 0.5)[None, None, :]
    gy = (np.arange(out_h, dtype=np.float64) + 0.5)[None, :, None]
    sx = x0s + gx * (ws / out_w)
    sy = y0s + gy * (hs / out_h)
    return _bilinear_sample(px, np.broadcast_to(sx, (n, out_h, out_w)),
                            np.broadcast_to(sy, (n, out_h, out_w))).astype(np.float32)


def crop_gray_batch(gray: np.ndarray, boxes: list[Box], out_w: int, out_h: int) -> np.ndarray:
    """(n, out_h, out_w) float32 bilinear crops of a 2-d gray plane.

    Sampling semantics match crop_resize_batch; this is the throughput path
    for candidate alignment (flat gathers, float32 blends).
    """
    n = len(boxes)
    g = np.ascontiguousarray(gray, dtype=np.float32)
    h, w = g.shape
    if n == 0:
        return np.zeros((0, out_h, out_w), dtype=np.float32)
    x0s = np.array([b.x0 for b in boxes])[:, None, None]
    y0s = np.array([b.y0 for b in boxes])[:, None, None]
    ws = np.array([b.w for b in boxes])[:, None, None]
    hs = np.array([b.h for b in boxes])[:, None, None]
    gx = (np.arange(out_w, dtype=np.float64) + 0.5)[None, None, :]
    gy = (np.arange(out_h, dtype=np.float64) + 0.5)[None, :, None]
    sx = x0s + gx * (ws / out_w)
    sy = y0s + gy * (hs / out_h)
    inside = ((sx >= 0.0) & (sx <= w)) & ((sy >= 0.0) & (sy <= h))
    cx = np.clip(sx, 0.5, w - 0.5) - 0.5
    cy = np.clip(sy, 0.5, h - 0.5) - 0.5
    xf = np.floor(cx)
    yf = np.floor(cy)
    xi = xf.astype(np.intp)
    yi = yf.astype(np.intp)
    xi1 = np.minimum(xi + 1, w - 1)
    yi1 = np.minimum(yi + 1, h - 1)
    tx = (cx - xf).astype(np.float32)
    ty = (cy - yf).astype(np.float32)
    flat = g.ravel()
    row = yi * w
    row1 = yi1 * w
    v00 = np.take(flat, row + xi)
    v01 = np.take(flat, row + xi1)
    v10 = np.take(flat, row1 + xi)
    v11 = np.take(flat, row1 + xi1)
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    return (top + ty * (bot - top)) * inside


def crop_resize(img: Image, box: Box, out_w: int, out_h: int) -> Image:
    """Bilinear resample of the box footprint to (out_w, out_h).

    Area outside the image is filled with 0. Raises EmptyCropError when the
    box does not intersect the image at all.
    """
    if box.clip(img.width, img.height) is None:
        raise EmptyCropError(f"box {box} does not intersect a {img.width}x{img.height} image")
    return Image(crop_resize_batch(img, [box], out_w, out_h)[0])


def resize_image(img: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resize of the whole image."""
    full = Box(img.width / 2.0, img.height / 2.0, float(img.width), float(img.height))
    return crop_resize(img, full, out_w, out_h)
