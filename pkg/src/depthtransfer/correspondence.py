"""Dense descriptor alignment between a query and a candidate frame.

Alignment is a coarse-to-fine discrete labeling: at each pyramid level every
query pixel picks a displacement within a search window around the
upsampled coarse estimate, minimizing descriptor L1 cost plus a truncated-L1
penalty on displacement differences between 4-neighbours, via winner-take-all
followed by red-black iterated conditional modes sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .fileio import read_warp_dump, write_warp_dump
from .imaging import DepthMap, sigmoid_weight, spatial_gradients

LEVELS = 3
RADIUS = 5
SWEEPS = 4
REG_PER_DIM = 0.005
TRUNCATE = 2.0
SMALL_DISPLACEMENT = 1e-3
OUTSIDE_COST = 1e6

MU_S = 0.5
SIGMA_S = 0.01


@dataclass
class WarpField:
    """Backward map: query pixel (r, c) samples candidate pixel (y[r, c], x[r, c])."""

    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray

    @classmethod
    def identity(cls, shape) -> WarpField:
        ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
        return cls(xs, ys, np.ones(shape, dtype=bool))

    @classmethod
    def from_offsets(cls, dx: np.ndarray, dy: np.ndarray) -> WarpField:
        h, w = dx.shape
        ys, xs = np.mgrid[0:h, 0:w]
        x = xs + dx
        y = ys + dy
        valid = (x >= 0) & (x < w) & (y >= 0) & (y < h)
        return cls(np.clip(x, 0, w - 1), np.clip(y, 0, h - 1), valid)

    @property
    def shape(self):
        return self.x.shape

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xs = np.mgrid[0 : self.shape[0], 0 : self.shape[1]]
        return self.x - xs, self.y - ys

    def sample(self, field: np.ndarray) -> np.ndarray:
        return field[self.y, self.x]

    def save(self, path):
        dx, dy = self.offsets()
        write_warp_dump(path, dx, dy, self.valid)

    @classmethod
    def load(cls, path) -> WarpField:
        dx, dy, valid = read_warp_dump(path)
        w = cls.from_offsets(dx, dy)
        w.valid &= valid
        return w


def _downsample_descriptors(desc: np.ndarray) -> np.ndarray:
    h, w, d = desc.shape
    h2, w2 = max(1, h // 2), max(1, w // 2)
    block = desc[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2, d).mean(axis=(1, 3))
    norm = np.linalg.norm(block, axis=-1, keepdims=True)
    return np.where(norm > 1e-8, block / np.maximum(norm, 1e-12), 0.0).astype(np.float32)


@numba.njit(cache=True)
def _cost_volume(q, c, dx0, dy0, radius, outside, small):
    h, w, d = q.shape
    n = 2 * radius + 1
    cost = np.empty((n * n, h, w), dtype=np.float32)
    for r in range(h):
        for col in range(w):
            bx = col + dx0[r, col]
            by = r + dy0[r, col]
            for oy in range(n):
                yy = by + oy - radius
                for ox in range(n):
                    xx = bx + ox - radius
                    lab = oy * n + ox
                    if yy < 0 or yy >= h or xx < 0 or xx >= w:
                        cost[lab, r, col] = outside
                        continue
                    s = 0.0
                    for k in range(d):
                        s += abs(q[r, col, k] - c[yy, xx, k])
                    s += small * (abs(xx - col) + abs(yy - r))
                    cost[lab, r, col] = s
    return cost


def _icm(cost, dx0, dy0, radius, reg, truncate, sweeps):
    n = 2 * radius + 1
    oy, ox = np.divmod(np.arange(n * n), n)
    lab_dx = dx0[None] + (ox - radius)[:, None, None]
    lab_dy = dy0[None] + (oy - radius)[:, None, None]
    label = np.argmin(cost, axis=0)
    h, w = label.shape
    rows, cols = np.mgrid[0:h, 0:w]
    color = (rows + cols) % 2
    for _ in range(sweeps):
        for phase in (0, 1):
            cur_dx = np.take_along_axis(lab_dx, label[None], 0)[0]
            cur_dy = np.take_along_axis(lab_dy, label[None], 0)[0]
            energy = cost.astype(np.float64)
            for sy, sx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                ndx = np.full((h, w), np.nan)
                ndy = np.full((h, w), np.nan)
                ys = slice(max(sy, 0), h + min(sy, 0))
                yd = slice(max(-sy, 0), h + min(-sy, 0))
                xs = slice(max(sx, 0), w + min(sx, 0))
                xd = slice(max(-sx, 0), w + min(-sx, 0))
                ndx[yd, xd] = cur_dx[ys, xs]
                ndy[yd, xd] = cur_dy[ys, xs]
                has = ~np.isnan(ndx)
                diff = np.abs(lab_dx - np.nan_to_num(ndx)[None]) + np.abs(lab_dy - np.nan_to_num(ndy)[None])
                energy += np.where(has[None], reg * np.minimum(diff, truncate), 0.0)
            best = np.argmin(energy, axis=0)
            upd = color == phase
            label[upd] = best[upd]
    dx = np.take_along_axis(lab_dx, label[None], 0)[0]
    dy = np.take_along_axis(lab_dy, label[None], 0)[0]
    return dx, dy


def align_dense(
    query: np.ndarray,
    cand: np.ndarray,
    levels: int = LEVELS,
    radius: int = RADIUS,
    sweeps: int = SWEEPS,
    reg_per_dim: float = REG_PER_DIM,
    truncate: float = TRUNCATE,
) -> WarpField:
    """Align two dense descriptor fields (H, W, d) of equal size."""
    if query.shape != cand.shape:
        raise ValueError(f"descriptor fields differ: {query.shape} vs {cand.shape}")
    reg = reg_per_dim * query.shape[-1]
    qp = [np.ascontiguousarray(query, dtype=np.float32)]
    cp = [np.ascontiguousarray(cand, dtype=np.float32)]
    for _ in range(levels - 1):
        if min(qp[-1].shape[:2]) < 2 * (2 * radius + 1):
            break
        qp.append(_downsample_descriptors(qp[-1]))
        cp.append(_downsample_descriptors(cp[-1]))

    dx = np.zeros(qp[-1].shape[:2], dtype=np.int64)
    dy = np.zeros_like(dx)
    for lvl in range(len(qp) - 1, -1, -1):
        q, c = qp[lvl], cp[lvl]
        h, w = q.shape[:2]
        if dx.shape != (h, w):
            ri = np.minimum(np.arange(h) // 2, dx.shape[0] - 1)
            ci = np.minimum(np.arange(w) // 2, dx.shape[1] - 1)
            dx = 2 * dx[np.ix_(ri, ci)]
            dy = 2 * dy[np.ix_(ri, ci)]
        ys, xs = np.mgrid[0:h, 0:w]
        dx = np.clip(xs + dx, 0, w - 1) - xs
        dy = np.clip(ys + dy, 0, h - 1) - ys
        cost = _cost_volume(q, c, dx.astype(np.int64), dy.astype(np.int64), radius, OUTSIDE_COST, SMALL_DISPLACEMENT)
        dx, dy = _icm(cost, dx, dy, radius, reg, truncate, sweeps)
    return WarpField.from_offsets(dx, dy)


def apply_warp(warp: WarpField, cand: DepthMap, mode: str = "value"):
    """Sample candidate depth (or its gradients) at the warp's source pixels.

    ``mode="value"`` returns ``(depth, valid)``. ``mode="gradient"``
    differentiates the candidate first and returns ``(gx, gy, valid_x,
    valid_y)``; a gradient is valid only between two valid depth samples.
    """
    if mode == "value":
        return warp.sample(cand.depth), warp.valid & warp.sample(cand.valid)
    if mode != "gradient":
        raise ValueError(f"unknown warp mode {mode!r}")
    gx, gy = spatial_gradients(cand.depth)
    vx = np.zeros_like(cand.valid)
    vy = np.zeros_like(cand.valid)
    vx[:, :-1] = cand.valid[:, :-1] & cand.valid[:, 1:]
    vy[:-1, :] = cand.valid[:-1, :] & cand.valid[1:, :]
    return (
        warp.sample(gx),
        warp.sample(gy),
        warp.valid & warp.sample(vx),
        warp.valid & warp.sample(vy),
    )


def descriptor_distance(query: np.ndarray, cand: np.ndarray, warp: WarpField) -> np.ndarray:
    """L2 distance between query descriptors and warped candidate descriptors."""
    warped = cand[warp.y, warp.x].astype(np.float64)
    dist = np.linalg.norm(query.astype(np.float64) - warped, axis=-1)
    return np.where(warp.valid, dist, 2.0)


def confidence_from_distance(dist, mu_s: float = MU_S, sigma_s: float = SIGMA_S) -> np.ndarray:
    return sigmoid_weight(dist, mu_s, sigma_s)


def warp_confidence(query: np.ndarray, cand: np.ndarray, warp: WarpField, mu_s: float = MU_S, sigma_s: float = SIGMA_S):
    """Per-pixel confidence that the warped candidate matches the query."""
    return confidence_from_distance(descriptor_distance(query, cand, warp), mu_s, sigma_s)
