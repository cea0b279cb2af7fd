"""Moving-object segmentation for clips without camera parallax.

Frames are exposure-matched to the darkest frame, stabilized onto a reference
frame with RANSAC homographies, and compared with a temporal-median
background. A pixel moves when flow magnitude times the squared background
difference, relative to the background, exceeds a threshold. Masks are mapped
back into each frame by the inverse homography. :func:`contact_depth` then
assigns each moving component the depth of the ground just below it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .features import compute_dense_descriptors, compute_optical_flow
from .imaging import bilinear_sample, to_gray

logger = logging.getLogger(__name__)

TAU = 0.01
RANSAC_THRESHOLD = 1.5
RANSAC_ITERS = 500
MIN_MATCHES = 8
MIN_COMPONENT_AREA = 25
CONTACT_BAND = 3


# --------------------------------------------------------------------------
# Exposure
# --------------------------------------------------------------------------


def match_histogram(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Map ``src`` values so their empirical CDF matches that of ``ref`` (per channel)."""
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if src.ndim == 3:
        return np.stack([match_histogram(src[..., c], ref[..., c]) for c in range(src.shape[2])], axis=-1)
    s_vals, s_idx, s_counts = np.unique(src.ravel(), return_inverse=True, return_counts=True)
    r_vals, r_counts = np.unique(ref.ravel(), return_counts=True)
    s_q = np.cumsum(s_counts) / src.size
    r_q = np.cumsum(r_counts) / ref.size
    return np.interp(s_q, r_q, r_vals)[s_idx].reshape(src.shape)


def equalize_to_darkest(frames: list[np.ndarray]) -> tuple[list[np.ndarray], int]:
    """Histogram-match every frame to the frame of lowest mean luma.

    Returns the adjusted frames and the reference index; the reference frame
    itself is returned unchanged.
    """
    if not frames:
        raise ValueError("need at least one frame")
    means = [to_gray(f).mean() for f in frames]
    ref = int(np.argmin(means))
    out = [f if i == ref else match_histogram(f, frames[ref]) for i, f in enumerate(frames)]
    return out, ref


# --------------------------------------------------------------------------
# Homographies
# --------------------------------------------------------------------------


def harris_corners(gray: np.ndarray, max_corners: int = 400, border: int = 10) -> np.ndarray:
    """Corner locations ``(N, 2)`` as ``(x, y)``, strongest first."""
    g = ndimage.gaussian_filter(gray, 1.0)
    ix = ndimage.sobel(g, axis=1)
    iy = ndimage.sobel(g, axis=0)
    sxx = ndimage.gaussian_filter(ix * ix, 1.5)
    syy = ndimage.gaussian_filter(iy * iy, 1.5)
    sxy = ndimage.gaussian_filter(ix * iy, 1.5)
    resp = sxx * syy - sxy**2 - 0.04 * (sxx + syy) ** 2
    peak = resp == ndimage.maximum_filter(resp, size=7)
    rmax = resp.max()
    if rmax <= 1e-10:
        return np.zeros((0, 2))
    keep = peak & (resp > 1e-4 * rmax)
    keep[:border] = keep[-border:] = False
    keep[:, :border] = keep[:, -border:] = False
    ys, xs = np.nonzero(keep)
    order = np.argsort(-resp[ys, xs])[:max_corners]
    return np.column_stack([xs[order], ys[order]]).astype(np.float64)


def match_descriptors(da: np.ndarray, db: np.ndarray, ratio: float = 0.8) -> np.ndarray:
    """Mutual nearest neighbours passing the ratio test; returns index pairs ``(M, 2)``."""
    if len(da) < 2 or len(db) < 2:
        return np.zeros((0, 2), dtype=int)
    d = np.linalg.norm(da[:, None, :] - db[None, :, :], axis=-1)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    two = np.sort(d, axis=1)[:, :2]
    ok = (nn_ba[nn_ab] == np.arange(len(da))) & (two[:, 0] < ratio * two[:, 1])
    idx = np.flatnonzero(ok)
    return np.column_stack([idx, nn_ab[idx]])


def _normalize_points(p):
    c = p.mean(axis=0)
    s = np.sqrt(2) / max(np.mean(np.linalg.norm(p - c, axis=1)), 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    return (p - c) * s, T


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT; least squares when more than four correspondences are given."""
    if len(src) < 4:
        return None
    ps, Ts = _normalize_points(src)
    pd, Td = _normalize_points(dst)
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    A[0::2, 0:3] = np.column_stack([-x, -y, -np.ones(n)])
    A[0::2, 6:9] = np.column_stack([u * x, u * y, u])
    A[1::2, 3:6] = np.column_stack([-x, -y, -np.ones(n)])
    A[1::2, 6:9] = np.column_stack([v * x, v * y, v])
    _, _, vt = np.linalg.svd(A)
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12 or abs(np.linalg.det(H)) < 1e-12:
        return None
    return H / H[2, 2]


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.column_stack([pts, np.ones(len(pts))]) @ H.T
    return ph[:, :2] / ph[:, 2:3]


def ransac_homography(
    src: np.ndarray,
    dst: np.ndarray,
    threshold: float = RANSAC_THRESHOLD,
    iters: int = RANSAC_ITERS,
    seed: int = 0,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Robust homography ``src -> dst``; returns ``(H, inlier mask)`` or ``(None, ...)``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    best = np.zeros(n, dtype=bool)
    if n < 4:
        return None, best
    rng = np.random.default_rng(seed)
    for _ in range(iters):
        pick = rng.choice(n, 4, replace=False)
        H = fit_homography(src[pick], dst[pick])
        if H is None:
            continue
        with np.errstate(all="ignore"):
            err = np.linalg.norm(project(H, src) - dst, axis=1)
        inl = err < threshold
        if inl.sum() > best.sum():
            best = inl
    if best.sum() < 4:
        return None, best
    for _ in range(2):
        H = fit_homography(src[best], dst[best])
        if H is None:
            return None, best
        err = np.linalg.norm(project(H, src) - dst, axis=1)
        best = err < threshold
    return H, best


def _keypoints(gray):
    """Harris corners and the dense descriptors sampled at them."""
    c = harris_corners(gray)
    if len(c) < MIN_MATCHES:
        return c, None
    d = compute_dense_descriptors(gray)[c[:, 1].astype(int), c[:, 0].astype(int)]
    return c, d


def _pair_homography(ka, kb, seed=0):
    """Homography mapping frame ``a`` pixel coordinates onto frame ``b``."""
    (ca, da), (cb, db) = ka, kb
    if da is None or db is None:
        return None
    m = match_descriptors(da, db)
    if len(m) < MIN_MATCHES:
        return None
    H, inl = ransac_homography(ca[m[:, 0]], cb[m[:, 1]], seed=seed)
    if H is None or inl.sum() < MIN_MATCHES:
        return None
    return H


def estimate_homographies(frames: list[np.ndarray], ref: int | None = None) -> tuple[list[np.ndarray], list[bool]]:
    """Homographies mapping each frame onto the reference frame (middle frame by default).

    Neighbouring frames are registered pairwise and chained. Returns the
    homographies and a per-frame low-confidence flag; a failed pair
    registration contributes the identity.
    """
    n = len(frames)
    ref = n // 2 if ref is None else ref
    keys = [_keypoints(to_gray(f)) for f in frames]
    H = [np.eye(3) for _ in range(n)]
    flags = [False] * n
    for k in range(ref - 1, -1, -1):
        step = _pair_homography(keys[k], keys[k + 1], seed=k)
        if step is None:
            flags[k] = True
            step = np.eye(3)
        H[k] = H[k + 1] @ step
        flags[k] = flags[k] or flags[k + 1]
    for k in range(ref + 1, n):
        step = _pair_homography(keys[k], keys[k - 1], seed=k)
        if step is None:
            flags[k] = True
            step = np.eye(3)
        H[k] = H[k - 1] @ step
        flags[k] = flags[k] or flags[k - 1]
    for k in range(n):
        H[k] = H[k] / H[k][2, 2]
        if flags[k]:
            logger.warning("frame %d: homography registration failed; using identity", k)
    return H, flags


def warp_homography(img: np.ndarray, H: np.ndarray, shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Render ``img`` in the target frame of ``H`` (``out(p) = img(H^-1 p)``); returns (image, coverage)."""
    h, w = shape if shape is not None else img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src = project(np.linalg.inv(H), np.column_stack([xs.ravel(), ys.ravel()]))
    out, inside = bilinear_sample(img, src[:, 0].reshape(h, w), src[:, 1].reshape(h, w))
    return out, inside


def stabilize(frames, homographies):
    pairs = [warp_homography(f, H) for f, H in zip(frames, homographies)]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def median_background(stabilized: list[np.ndarray], coverage: list[np.ndarray] | None = None):
    """Per-pixel temporal median over the frames covering each pixel.

    Returns ``(B, valid)``; pixels no frame covers are invalid.
    """
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in stabilized])
    if coverage is not None:
        cov = np.stack(coverage).astype(bool)
        if stack.ndim == 4:
            cov = cov[..., None]
        stack = np.where(cov, stack, np.nan)
    valid = np.isfinite(stack).any(axis=0)
    with np.errstate(all="ignore"):
        B = np.nanmedian(np.where(valid[None], stack, 0.0), axis=0)
    if B.ndim == 3:
        valid = valid.all(axis=-1)
    return B, valid


def motion_statistic(W: np.ndarray, B: np.ndarray, flow_mag: np.ndarray) -> np.ndarray:
    """``|flow| * (W - B)^2 / B`` on luma; 0 where the background is (near) black."""
    lw, lb = to_gray(W), to_gray(B)
    ok = lb > 1e-3
    return np.where(ok, flow_mag * (lw - lb) ** 2 / np.where(ok, lb, 1.0), 0.0)


_CROSS = ndimage.generate_binary_structure(2, 1)


def per_frame_flows(frames: list[np.ndarray]):
    """One flow per frame: towards the next frame, and back to the previous one for the last."""
    n = len(frames)
    if n < 2:
        return [None] * n
    flows = [compute_optical_flow(frames[k], frames[k + 1]) for k in range(n - 1)]
    flows.append(compute_optical_flow(frames[-1], frames[-2]))
    return flows


def motion_masks(
    stabilized: list[np.ndarray],
    background: np.ndarray,
    background_valid: np.ndarray,
    flows,
    homographies: list[np.ndarray],
    coverage: list[np.ndarray] | None = None,
    tau: float = TAU,
    shape=None,
) -> list[np.ndarray]:
    """Threshold the motion statistic in reference coordinates, then unwarp into each frame.

    ``flows[k]`` is the flow of stabilized frame ``k`` (see
    :func:`per_frame_flows`); ``None`` means no motion evidence.
    """
    out = []
    for k, W in enumerate(stabilized):
        mag = np.zeros(background.shape[:2]) if flows[k] is None else flows[k].magnitude()
        m = (motion_statistic(W, background, mag) > tau) & background_valid
        if coverage is not None:
            m &= coverage[k]
        frame_shape = shape if shape is not None else m.shape
        back, _ = warp_homography(m.astype(np.float64), np.linalg.inv(homographies[k]), frame_shape)
        out.append(ndimage.binary_opening(back > 0.5, structure=_CROSS))
    return out


@dataclass
class Segmentation:
    masks: list[np.ndarray]
    homographies: list[np.ndarray]
    low_confidence: list[bool]
    background: np.ndarray
    reference: int


def segment_clip(frames: list[np.ndarray], tau: float = TAU) -> Segmentation:
    """Full moving-object segmentation of a clip."""
    eq, _ = equalize_to_darkest(frames)
    ref = len(frames) // 2
    H, flags = estimate_homographies(eq, ref)
    stab, cov = stabilize(eq, H)
    B, Bvalid = median_background(stab, cov)
    # uncovered borders take the background so they produce no spurious flow
    filled = [np.where(c[..., None] if s.ndim == 3 else c, s, B) for s, c in zip(stab, cov)]
    masks = motion_masks(filled, B, Bvalid, per_frame_flows(filled), H, cov, tau)
    return Segmentation(masks, H, flags, B, ref)


def contact_depth(
    masks: list[np.ndarray],
    init_depths: list[np.ndarray],
    min_area: int = MIN_COMPONENT_AREA,
    band: int = CONTACT_BAND,
) -> list[np.ndarray]:
    """Ground-contact depth per moving component (NaN outside kept components).

    For each 8-connected component of at least ``min_area`` pixels the depth
    is the median of the initial depth in the ``band`` rows directly below the
    component's bottom row, over the component's column span. A component
    touching the bottom edge uses its own bottom-row pixels instead.
    """
    out = []
    eight = np.ones((3, 3), dtype=bool)
    for m, d in zip(masks, init_depths):
        d = np.asarray(getattr(d, "depth", d), dtype=np.float64)
        h = d.shape[0]
        res = np.full(d.shape, np.nan)
        labels, n = ndimage.label(m, structure=eight)
        for lab in range(1, n + 1):
            rows, cols = np.nonzero(labels == lab)
            if rows.size < min_area:
                continue
            bottom = rows.max()
            if bottom >= h - 1:
                samples = d[bottom, cols[rows == bottom]]
            else:
                r0, r1 = bottom + 1, min(bottom + band, h - 1)
                samples = d[r0 : r1 + 1, cols.min() : cols.max() + 1]
            res[rows, cols] = np.median(samples)
        out.append(res)
    return out


def write_homographies(path, homographies: list[np.ndarray]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"h{i}{j}" for i in range(3) for j in range(3)])
        for k, H in enumerate(homographies):
            w.writerow([k] + [repr(float(v)) for v in np.asarray(H).ravel()])


def read_homographies(path) -> list[np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [np.array([float(v) for v in r[1:]]).reshape(3, 3) for r in rows]
