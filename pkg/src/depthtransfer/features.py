"""Scene descriptors, dense per-pixel descriptors, and optical flow."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import solver
from .imaging import FlowField, bilinear_sample, pyramid, resize_bilinear, to_gray

GIST_SIZE = 128
GIST_SCALES = 4
GIST_ORIENTATIONS = 8
GIST_GRID = 4

FLOW_BLOCKS = 4
MATCH_OMEGA = 0.5

DESC_CELL = 4
DESC_BINS = 8
DESC_CELLS = 4  # per side; support = DESC_CELLS * DESC_CELL pixels
DESC_DIM = DESC_CELLS * DESC_CELLS * DESC_BINS


# --------------------------------------------------------------------------
# GIST
# --------------------------------------------------------------------------

_gabor_cache: dict = {}


def _gabor_bank(size: int, scales: int, orientations: int) -> np.ndarray:
    """Log-Gabor transfer functions, shape (scales, orientations, size, size).

    One-sided in orientation, so the filtered response is complex and its
    magnitude is the local oriented energy. Zero at DC.
    """
    key = (size, scales, orientations)
    if key in _gabor_cache:
        return _gabor_cache[key]
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    theta = np.arctan2(fy, fx)
    radius[0, 0] = 1.0
    log_r = np.log(radius)
    bank = np.empty((scales, orientations, size, size))
    sigma_theta = 0.6 * np.pi / orientations
    for s in range(scales):
        f0 = 0.25 / 2**s
        radial = np.exp(-((log_r - np.log(f0)) ** 2) / (2 * np.log(0.55) ** 2))
        radial[0, 0] = 0.0
        for o in range(orientations):
            t0 = o * np.pi / orientations
            dtheta = np.angle(np.exp(1j * (theta - t0)))
            bank[s, o] = radial * np.exp(-(dtheta**2) / (2 * sigma_theta**2))
    _gabor_cache[key] = bank
    return bank


def compute_gist(
    img: np.ndarray,
    scales: int = GIST_SCALES,
    orientations: int = GIST_ORIENTATIONS,
    grid: int = GIST_GRID,
    size: int = GIST_SIZE,
) -> np.ndarray:
    """GIST-style descriptor: log-Gabor energy on the luma, averaged on a grid.

    Returns ``scales * orientations * grid**2`` nonnegative values ordered
    (scale, orientation, cell row, cell col).
    """
    gray = to_gray(img)
    if min(gray.shape) <= 2 * grid:
        raise ValueError(f"image {gray.shape} too small for a {grid}x{grid} GIST grid")
    gray = resize_bilinear(gray, size, size)
    spectrum = np.fft.fft2(gray)
    bank = _gabor_bank(size, scales, orientations)
    energy = np.abs(np.fft.ifft2(spectrum[None, None] * bank))
    cell = size // grid
    pooled = energy[..., : cell * grid, : cell * grid].reshape(scales, orientations, grid, cell, grid, cell)
    return pooled.mean(axis=(3, 5)).ravel()


# --------------------------------------------------------------------------
# Optical flow
# --------------------------------------------------------------------------


def _laplacian(h: int, w: int) -> sp.csr_matrix:
    gx = solver.grad_x(h, w).matrix
    gy = solver.grad_y(h, w).matrix
    return (gx.T @ gx + gy.T @ gy).tocsr()


def compute_optical_flow(
    a: np.ndarray,
    b: np.ndarray,
    levels: int = 3,
    warps: int = 5,
    alpha: float = 0.03,
    presmooth: float = 1.0,
) -> FlowField:
    """Coarse-to-fine variational (Horn-Schunck) flow from ``a`` to ``b``.

    The result satisfies ``a(p) ~ b(p + flow(p))``. Each pyramid level runs
    ``warps`` linearize-and-solve passes; each pass solves the quadratic
    brightness-constancy plus smoothness energy for a flow increment.
    """
    a = to_gray(a)
    b = to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if presmooth > 0:
        a = ndimage.gaussian_filter(a, presmooth, mode="nearest")
        b = ndimage.gaussian_filter(b, presmooth, mode="nearest")
    pa = pyramid(a, levels)[::-1]
    pb = pyramid(b, levels)[::-1]

    u = np.zeros(pa[0].shape)
    v = np.zeros(pa[0].shape)
    for lvl, (ia, ib) in enumerate(zip(pa, pb)):
        h, w = ia.shape
        if lvl > 0:
            ph, pw = u.shape
            u = resize_bilinear(u, w, h) * (w / pw)
            v = resize_bilinear(v, w, h) * (h / ph)
        lap = _laplacian(h, w)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        ay, ax = np.gradient(ia)
        for _ in range(warps):
            bw, inside = bilinear_sample(ib, xs + u, ys + v)
            by, bx = np.gradient(bw)
            ix = 0.5 * (ax + bx)
            iy = 0.5 * (ay + by)
            it = bw - ia
            m = inside.astype(np.float64)
            ix, iy, it = (ix * m).ravel(), (iy * m).ravel(), (it * m).ravel()
            a2 = alpha**2
            A = sp.bmat(
                [
                    [sp.diags(ix * ix) + a2 * lap, sp.diags(ix * iy)],
                    [sp.diags(ix * iy), sp.diags(iy * iy) + a2 * lap],
                ],
                format="csr",
            )
            A = A + 1e-9 * sp.identity(A.shape[0], format="csr")
            rhs = np.concatenate([-ix * it - a2 * (lap @ u.ravel()), -iy * it - a2 * (lap @ v.ravel())])
            step, _ = solver.pcg_solve(A, rhs, solver.IncompleteCholesky(A), tol=1e-5, maxiter=500)
            u = u + step[: h * w].reshape(h, w)
            v = v + step[h * w :].reshape(h, w)
    return FlowField(u, v)


def clip_flows(frames: list[np.ndarray], **kwargs) -> list[FlowField]:
    """Flow between each pair of consecutive frames (``len(frames) - 1`` fields)."""
    return [compute_optical_flow(frames[i], frames[i + 1], **kwargs) for i in range(len(frames) - 1)]


def compute_flow_features(flow: FlowField | None, b: int = FLOW_BLOCKS, shape=None) -> np.ndarray:
    """Per block of a ``b x b`` grid: mean/std of u, v, u^2, v^2 (``8 b^2`` values).

    ``flow=None`` stands for the identity warp (single image or last frame)
    and needs ``shape``.
    """
    if b < 1:
        raise ValueError("block count must be positive")
    if flow is None:
        flow = FlowField.zeros(shape)
    h, w = flow.shape
    if h < b or w < b:
        raise ValueError(f"flow {flow.shape} smaller than {b}x{b} blocks")
    rows = np.array_split(np.arange(h), b)
    cols = np.array_split(np.arange(w), b)
    chans = (flow.u, flow.v, flow.u**2, flow.v**2)
    out = []
    for r in rows:
        for c in cols:
            for ch in chans:
                block = ch[np.ix_(r, c)]
                out.extend((block.mean(), block.std()))
    return np.asarray(out)


def clip_flow_features(frames: list[np.ndarray], flows: list[FlowField] | None = None, b: int = FLOW_BLOCKS):
    """Flow features per frame; the last frame (or a lone image) uses the identity warp."""
    shape = to_gray(frames[0]).shape
    if flows is None:
        flows = clip_flows(frames) if len(frames) > 1 else []
    feats = [compute_flow_features(f, b) for f in flows]
    feats.append(compute_flow_features(None, b, shape=shape))
    return feats


# --------------------------------------------------------------------------
# Dense descriptors
# --------------------------------------------------------------------------


def compute_dense_descriptors(img: np.ndarray) -> np.ndarray:
    """Per-pixel SIFT-like descriptors, shape (H, W, 128), float32.

    A 16x16 support around each pixel is split into 4x4 cells; each cell
    holds an 8-bin histogram of gradient orientation weighted by magnitude
    (linear interpolation between bins). Descriptors are L2-normalized,
    clipped at 0.2 and renormalized; flat patches stay all-zero.
    """
    gray = to_gray(img)
    h, w = gray.shape
    support = DESC_CELLS * DESC_CELL
    if min(h, w) < support:
        raise ValueError(f"image {gray.shape} smaller than the {support}px descriptor support")
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    pos = (np.arctan2(gy, gx) % (2 * np.pi)) / (2 * np.pi) * DESC_BINS
    b0 = np.floor(pos).astype(int) % DESC_BINS
    frac = pos - np.floor(pos)
    b1 = (b0 + 1) % DESC_BINS

    hist = np.zeros((DESC_BINS, h, w))
    for k in range(DESC_BINS):
        hist[k] = np.where(b0 == k, mag * (1 - frac), 0.0) + np.where(b1 == k, mag * frac, 0.0)
    # box sum over the cell [x, x+3] x [y, y+3]
    cells = ndimage.uniform_filter(hist, size=(1, DESC_CELL, DESC_CELL), mode="nearest", origin=(0, -2, -2))
    cells *= DESC_CELL * DESC_CELL

    pad = support
    padded = np.pad(cells, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    offsets = [-support // 2 + DESC_CELL * i for i in range(DESC_CELLS)]
    desc = np.empty((h, w, DESC_DIM), dtype=np.float64)
    k = 0
    for oy in offsets:
        for ox in offsets:
            block = padded[:, pad + oy : pad + oy + h, pad + ox : pad + ox + w]
            desc[:, :, k : k + DESC_BINS] = np.moveaxis(block, 0, -1)
            k += DESC_BINS
    desc = _normalize(desc)
    desc = _normalize(np.minimum(desc, 0.2))
    return desc.astype(np.float32)


def _normalize(desc: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    return np.where(norm > 1e-8, desc / np.maximum(norm, 1e-12), 0.0)


def matching_score(g1, f1, g2, f2, omega: float = MATCH_OMEGA) -> float:
    """``(1 - omega) ||G1 - G2|| + omega ||F1 - F2||``; lower is a better match."""
    g1, g2, f1, f2 = (np.asarray(a, dtype=np.float64) for a in (g1, g2, f1, f2))
    if g1.shape != g2.shape or f1.shape != f2.shape:
        raise ValueError("feature dimensions differ")
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    return float((1 - omega) * np.linalg.norm(g1 - g2) + omega * np.linalg.norm(f1 - f2))
