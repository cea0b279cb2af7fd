"""Raster containers and the low-level image operations shared by every stage.

Rasters are plain numpy arrays of float64: ``(H, W)`` for single-channel data
and ``(H, W, C)`` for multi-channel images. Intensities live in ``[0, 1]``.
Depth is carried by :class:`DepthMap` (meters plus a validity mask) and
optical flow by :class:`FlowField`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class DepthMap:
    """Metric depth with a per-pixel validity mask (``False`` marks a hole)."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise ValueError(f"depth {self.depth.shape} and mask {self.valid.shape} differ")

    @classmethod
    def from_array(cls, depth: np.ndarray) -> DepthMap:
        """Wrap an array, treating non-finite and non-positive samples as holes."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class FlowField:
    """Dense displacement: pixel ``(x, y)`` of the source maps to ``(x+u, y+v)``."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, shape) -> FlowField:
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def as_float_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def _check_size(r: np.ndarray):
    if r.ndim < 2 or r.shape[0] == 0 or r.shape[1] == 0:
        raise ValueError(f"zero-sized raster {r.shape}")


def resize_bilinear(r: np.ndarray, w: int, h: int) -> np.ndarray:
    """Resize to ``w x h`` with pixel-center aligned bilinear interpolation."""
    r = np.asarray(r, dtype=np.float64)
    _check_size(r)
    if w < 1 or h < 1:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    H, W = r.shape[:2]
    if (W, H) == (w, h):
        return r.copy()

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, H)
    x0, x1, fx = axis(w, W)
    if r.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = r[y0][:, x0] * (1 - fx) + r[y0][:, x1] * fx
    bot = r[y1][:, x0] * (1 - fx) + r[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_nearest(r: np.ndarray, w: int, h: int) -> np.ndarray:
    """Nearest-neighbour resize; used for depth and masks so no values are invented."""
    r = np.asarray(r)
    _check_size(r)
    H, W = r.shape[:2]
    ys = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return r[ys][:, xs]


def resize_depth(d: DepthMap, w: int, h: int) -> DepthMap:
    return DepthMap(resize_nearest(d.depth, w, h), resize_nearest(d.valid, w, h))


def rgb_to_luma(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 3 or r.shape[2] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {r.shape}")
    return np.clip(r @ LUMA_WEIGHTS, 0.0, 1.0)


def to_gray(r: np.ndarray) -> np.ndarray:
    """Luma for color input, passthrough for single-channel input."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 2:
        return r
    if r.ndim == 3 and r.shape[2] == 1:
        return r[..., 0]
    return rgb_to_luma(r)


def spatial_gradients(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences; the last column (gx) and last row (gy) are zero."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2:
        raise ValueError(f"expected a single-channel raster, got shape {r.shape}")
    gx = np.zeros_like(r)
    gy = np.zeros_like(r)
    gx[:, :-1] = r[:, 1:] - r[:, :-1]
    gy[:-1, :] = r[1:, :] - r[:-1, :]
    return gx, gy


def fill_depth_holes(d: DepthMap) -> DepthMap:
    """Fill holes by horizontal propagation of the nearest valid sample.

    Each row is swept left-to-right carrying the last valid value, then
    right-to-left for the leading holes. Rows with no valid sample at all copy
    the nearest filled row.
    """
    if not d.valid.any():
        raise ValueError("depth map has no valid pixels")
    H, W = d.shape
    out = np.where(d.valid, d.depth, 0.0)
    valid = d.valid
    cols = np.arange(W)

    # index of the last valid column at or before x (left-to-right pass)
    left = np.where(valid, cols[None, :], -1)
    np.maximum.accumulate(left, axis=1, out=left)
    # index of the first valid column at or after x (right-to-left pass)
    right = np.where(valid, cols[None, :], W)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]

    src = np.where(left >= 0, left, right)
    row_ok = valid.any(axis=1)
    rows = np.arange(H)[:, None]
    filled = out[rows, np.clip(src, 0, W - 1)]

    if not row_ok.all():
        good = np.flatnonzero(row_ok)
        nearest = good[np.abs(np.arange(H)[:, None] - good[None, :]).argmin(axis=1)]
        filled = filled[nearest]
    filled[valid] = d.depth[valid]
    return DepthMap(filled, np.ones_like(valid))


def bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``img`` at float coordinates; returns (values, inside-mask).

    Outside samples are clamped to the border and flagged ``False``.
    """
    H, W = img.shape[:2]
    inside = (x >= -0.5) & (x <= W - 0.5) & (y >= -0.5) & (y <= H - 0.5)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(int), W - 1)
    y0 = np.minimum(np.floor(yc).astype(int), H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def warp_image(img: np.ndarray, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Backward-warp: ``out(p) = img(p + flow(p))``."""
    H, W = flow.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return bilinear_sample(img, xs + flow.u, ys + flow.v)


def pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Fine-to-coarse list of half-resolution images (2x2 box then decimate)."""
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        cur = out[-1]
        H, W = cur.shape[:2]
        if H < 4 or W < 4:
            break
        out.append(resize_bilinear(cur, max(1, W // 2), max(1, H // 2)))
    return out


def sigmoid_weight(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Decreasing soft threshold ``1 / (1 + exp((x - mu) / sigma))``."""
    z = np.clip((np.asarray(x, dtype=np.float64) - mu) / sigma, -700.0, 700.0)
    return 1.0 / (1.0 + np.exp(z))
