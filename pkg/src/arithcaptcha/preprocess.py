"""Denoising and geometric normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .imagecore import BinaryImage, GrayImage, histogram


class ThresholdResult(NamedTuple):
    binary: BinaryImage
    level: int
    degenerate: bool


def otsu_level(counts: np.ndarray) -> int:
    """Threshold ``t`` maximizing between-class variance of ``{v < t}`` vs ``{v >= t}``.

    Ties resolve to the lowest level. Returns -1 for a single-mode histogram.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    levels = np.arange(256, dtype=np.float64)
    # w0[t], m0[t]: mass and first moment strictly below t
    w0 = np.concatenate(([0.0], np.cumsum(counts)[:-1])) / total
    m0 = np.concatenate(([0.0], np.cumsum(counts * levels)[:-1])) / total
    mu = float((counts * levels).sum()) / total
    denom = w0 * (1.0 - w0)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(denom > 0, (mu * w0 - m0) ** 2 / denom, 0.0)
    if not np.any(var > 0):
        return -1
    return int(np.argmax(var))


def otsu_threshold(img: GrayImage, dark_foreground: bool = True) -> ThresholdResult:
    counts = histogram(img)
    level = otsu_level(counts)
    if level < 0:
        const = int(np.flatnonzero(counts)[0])
        return ThresholdResult(BinaryImage(np.zeros(img.pixels.shape, bool)), const, True)
    if dark_foreground:
        mask = img.pixels < level
    else:
        mask = img.pixels >= level
    return ThresholdResult(BinaryImage(mask), level, False)


def median_filter(img: GrayImage, tau: int) -> GrayImage:
    """Median over the ``(2*tau+1)**2`` window with replicated edges.

    A 256-bin kernel histogram per output row slides left to right: each
    step retires the column leaving the window and admits the one entering,
    so a pixel costs ``2*(2*tau+1)`` histogram updates instead of a sort.
    All rows advance together.
    """
    if tau < 1:
        raise ValueError("radius must be ≥ 1")
    if img.size == 0:
        raise ValueError("empty input")
    h, w = img.pixels.shape
    k = 2 * tau + 1
    half = (k * k) // 2
    padded = np.pad(img.pixels, tau, mode="edge").astype(np.intp)
    # columns[c][i, r] = padded[i + r, c]: the k vertical samples of column c seen by output row i
    columns = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)  # (h, w+2tau, k)
    rows = np.arange(h)
    hist = np.zeros((h, 256), dtype=np.int32)
    for c in range(k):
        for r in range(k):
            hist[rows, columns[:, c, r]] += 1
    out = np.empty((h, w), dtype=np.uint8)
    out[:, 0] = np.argmax(np.cumsum(hist, axis=1) > half, axis=1)
    for j in range(1, w):
        leaving = columns[:, j - 1]
        entering = columns[:, j + 2 * tau]
        for r in range(k):
            # one sample per row per pass, so no duplicate (row, level) pairs
            hist[rows, leaving[:, r]] -= 1
            hist[rows, entering[:, r]] += 1
        out[:, j] = np.argmax(np.cumsum(hist, axis=1) > half, axis=1)
    return GrayImage(out)


def denoise(img: GrayImage, tau: int = 1) -> BinaryImage:
    """Global threshold followed by a median pass on the 0/255 mask."""
    binary = otsu_threshold(img).binary
    cleaned = median_filter(binary.to_gray(), tau)
    return BinaryImage(cleaned.pixels < 128)


@dataclass(frozen=True)
class AffineMap:
    """``(x, y) -> (a*x + b*y + tx, d*x + e*y + ty)`` in pixel coordinates."""

    a: float = 1.0
    b: float = 0.0
    d: float = 0.0
    e: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def rotation(cls, theta_deg: float, cx: float = 0.0, cy: float = 0.0) -> "AffineMap":
        """Rotation by ``theta_deg`` about ``(cx, cy)`` with matrix [[cos, -sin], [sin, cos]]."""
        t = math.radians(theta_deg)
        c, s = math.cos(t), math.sin(t)
        return cls(c, -s, s, c, cx - (c * cx - s * cy), cy - (s * cx + c * cy))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineMap":
        return cls(tx=tx, ty=ty)

    @property
    def determinant(self) -> float:
        return self.a * self.e - self.b * self.d

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.a * x + self.b * y + self.tx, self.d * x + self.e * y + self.ty

    def inverse(self) -> "AffineMap":
        det = self.determinant
        if det == 0 or not math.isfinite(det):
            raise ValueError("non-invertible affine map")
        ia, ib = self.e / det, -self.b / det
        id_, ie = -self.d / det, self.a / det
        return AffineMap(ia, ib, id_, ie, -(ia * self.tx + ib * self.ty), -(id_ * self.tx + ie * self.ty))

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """``self ∘ inner``: apply ``inner`` first."""
        return AffineMap(
            self.a * inner.a + self.b * inner.d,
            self.a * inner.b + self.b * inner.e,
            self.d * inner.a + self.e * inner.d,
            self.d * inner.b + self.e * inner.e,
            self.a * inner.tx + self.b * inner.ty + self.tx,
            self.d * inner.tx + self.e * inner.ty + self.ty,
        )


_EDGE_EPS = 1e-9


def _bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float) -> np.ndarray:
    h, w = src.shape
    inside = (sx >= -_EDGE_EPS) & (sx <= w - 1 + _EDGE_EPS) & (sy >= -_EDGE_EPS) & (sy <= h - 1 + _EDGE_EPS)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0
    s = src.astype(np.float64)
    top = s[y0, x0] * (1 - fx) + s[y0, x1] * fx
    bot = s[y1, x0] * (1 - fx) + s[y1, x1] * fx
    val = top * (1 - fy) + bot * fy
    return np.where(inside, val, fill)


def affine_transform(img: GrayImage, m: AffineMap, fill: int = 255) -> GrayImage:
    """Resample ``img`` under ``m`` by inverse mapping and bilinear interpolation."""
    inv = m.inverse()
    ys, xs = np.mgrid[0:img.height, 0:img.width]
    sx, sy = inv.apply(xs, ys)
    val = _bilinear(img.pixels, sx, sy, float(fill))
    return GrayImage(np.clip(np.rint(val), 0, 255).astype(np.uint8))


def rotate(img: GrayImage, theta: float, fill: int = 255) -> GrayImage:
    """Rotate about the image center.

    ``theta`` is in degrees and applied with the matrix [[cos, -sin], [sin, cos]]
    in pixel coordinates (y down), so positive angles turn clockwise on screen.
    """
    if theta == 0:
        return img
    m = AffineMap.rotation(theta, (img.width - 1) / 2.0, (img.height - 1) / 2.0)
    return affine_transform(img, m, fill)


def resize(img: GrayImage, width: int, height: int) -> GrayImage:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    if width < 1 or height < 1:
        raise ValueError("target size must be positive")
    if (width, height) == (img.width, img.height):
        return img
    sx = (np.arange(width) + 0.5) * (img.width / width) - 0.5
    sy = (np.arange(height) + 0.5) * (img.height / height) - 0.5
    gx, gy = np.meshgrid(np.clip(sx, 0, img.width - 1), np.clip(sy, 0, img.height - 1))
    val = _bilinear(img.pixels, gx, gy, 255.0)
    return GrayImage(np.clip(np.rint(val), 0, 255).astype(np.uint8))
