"""Stereo view synthesis from inferred depth.

Depth becomes disparity ``W0 = W_max / (D + eps)``. A quadratic,
saliency-weighted objective then relaxes the disparity so that salient and
near pixels keep their values while flat, far regions absorb the
distortion. The result is halved and each frame is splatted into a left view
(``+W/2``) and a right view (``-W/2``), after a window shift that puts the
nearest object at zero disparity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from . import solver
from .depth_infer import FrameOperators, flow_confidence, smoothness_weights
from .imaging import DepthMap, FlowField, sigmoid_weight, spatial_gradients, to_gray

EPS_DISPARITY = 0.01
LAMBDA = 10.0
MU = 10.0
WMAX_AT_640 = 25.0
SALIENCY_MU = 0.01
SALIENCY_SIGMA = 0.002
SPLAT_SIGMA_Y = 0.5
SPLAT_SIGMA_X_MIN = 0.5
SPLAT_SIGMA_X_MAX = 4.0
Z_TEMPERATURE = 1.0
CORE_RADIUS = 1.0


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    shift: float = 0.0

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError(f"views differ in size: {self.left.shape} vs {self.right.shape}")


def scaled_wmax(wmax_at_640: float, width: int) -> float:
    """Maximum disparity for a frame ``width`` pixels wide, given the value at 640 pixels."""
    return wmax_at_640 * width / 640.0


def depth_to_disparity(D, w_max: float, eps: float = EPS_DISPARITY) -> np.ndarray:
    """``W0 = w_max / (D + eps)``; depth must be finite and positive everywhere."""
    d = np.asarray(getattr(D, "depth", D), dtype=np.float64)
    if w_max <= 0:
        raise ValueError("w_max must be positive")
    bad = ~np.isfinite(d) | (d <= 0)
    if isinstance(D, DepthMap):
        bad |= ~D.valid
    if bad.any():
        raise ValueError(f"{int(bad.sum())} depth pixels are not positive; fill holes first")
    return w_max / (d + eps)


def saliency_weights(L: np.ndarray, W0: np.ndarray, w_max: float) -> np.ndarray:
    """``l = W0/w_max + sigmoid((|grad L| - 0.01)/0.002)``, increasing in gradient magnitude."""
    gx, gy = spatial_gradients(to_gray(L))
    if gx.shape != np.shape(W0):
        raise ValueError(f"image {gx.shape} and disparity {np.shape(W0)} differ")
    g = np.hypot(gx, gy)
    return np.asarray(W0, dtype=np.float64) / w_max + sigmoid_weight(-g, -SALIENCY_MU, SALIENCY_SIGMA)


def disparity_stack(
    W0: list[np.ndarray],
    l: list[np.ndarray],
    frames: list[np.ndarray] | None,
    lam: float = LAMBDA,
    mu: float = MU,
    flows: list[FlowField] | None = None,
    flow_conf: list[np.ndarray] | None = None,
    mu_l: float = 0.05,
    sigma_l: float = 0.01,
) -> solver.TermStack:
    """Quadratic term stack of the warp objective over stacked frames."""
    n = len(W0)
    h, w = np.shape(W0[0])
    ops = FrameOperators(h, w, n)
    stack = solver.TermStack(n * h * w)
    for t in range(n):
        stack.add(solver.RobustTerm(ops.sel[t], W0[t], l[t], solver.QUADRATIC, name=f"data[{t}]"))
        if lam > 0:
            if frames is None:
                sx = sy = np.ones((h, w))
            else:
                sx, sy = smoothness_weights(frames[t], mu_l, sigma_l)
            stack.add(
                solver.RobustTerm(ops.gx[t], 0.0, sx.ravel() * ops.has_x, solver.QUADRATIC, lam, f"smooth_x[{t}]")
            )
            stack.add(
                solver.RobustTerm(ops.gy[t], 0.0, sy.ravel() * ops.has_y, solver.QUADRATIC, lam, f"smooth_y[{t}]")
            )
    if mu > 0 and n > 1 and flows is not None:
        if len(flows) != n - 1:
            raise ValueError(f"{n} frames need {n - 1} flows")
        if flow_conf is None:
            if frames is None:
                raise ValueError("temporal weights need the frames or explicit flow confidences")
            flow_conf = flow_confidence(frames, flows, mu_l, sigma_l)
        for t, flow in enumerate(flows):
            op = solver.flow_difference(flow, t, n)
            stack.add(solver.RobustTerm(op, 0.0, flow_conf[t].ravel()[op.rows], solver.QUADRATIC, mu, f"temporal[{t}]"))
    return stack


def optimize_disparity(
    W0,
    l,
    frames=None,
    lam: float = LAMBDA,
    mu: float = MU,
    flows: list[FlowField] | None = None,
    flow_conf: list[np.ndarray] | None = None,
    tol: float = 1e-12,
):
    """Exact minimizer of the quadratic warp objective (one PCG solve).

    Accepts a single ``(H, W)`` disparity or a list of frames and returns the
    same shape.
    """
    single = isinstance(W0, np.ndarray) and W0.ndim == 2
    W0s = [W0] if single else list(W0)
    ls = [l] if single else list(l)
    fr = None if frames is None else ([frames] if single else list(frames))
    stack = disparity_stack(W0s, ls, fr, lam, mu, flows, flow_conf)
    x0 = np.concatenate([np.ravel(w) for w in W0s])
    cfg = solver.SolverConfig(pcg_tol=tol, pcg_max_iters=20000)
    res = solver.irls_minimize(stack, x0, cfg)
    if not res.converged:
        raise solver.SolverError(f"disparity solve stopped at residual {res.pcg_residuals[-1]:.2e}")
    h, w = np.shape(W0s[0])
    out = [res.x[t * h * w : (t + 1) * h * w].reshape(h, w) for t in range(len(W0s))]
    return out[0] if single else out


def warp_energy(stack: solver.TermStack, W) -> float:
    x = np.concatenate([np.ravel(w) for w in (W if isinstance(W, list) else [W])])
    return solver.objective(stack, x)


# --------------------------------------------------------------------------
# Rendering
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _splat_rows(img, disp, sigma_x, zw, core_acc, core_w, tail_acc, tail_w):
    h, w, c = img.shape
    for r in range(h):
        for col in range(w):
            tx = col + disp[r, col]
            sx = sigma_x[r, col]
            rad = sx + 0.5
            lo = int(np.ceil(tx - rad))
            hi = int(np.floor(tx + rad))
            for xi in range(max(lo, 0), min(hi, w - 1) + 1):
                dx = xi - tx
                if abs(dx) >= rad:
                    continue
                g = zw[r, col] * np.exp(-0.5 * dx * dx / (sx * sx))
                if abs(dx) < CORE_RADIUS:
                    for k in range(c):
                        core_acc[r, xi, k] += g * img[r, col, k]
                    core_w[r, xi] += g
                else:
                    for k in range(c):
                        tail_acc[r, xi, k] += g * img[r, col, k]
                    tail_w[r, xi] += g


def splat_view(frame: np.ndarray, displacement: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Forward-splat ``frame`` by a horizontal per-pixel ``displacement``.

    Each source pixel is a Gaussian blob with ``sigma_y = 0.5`` and ``sigma_x``
    growing with the local displacement gradient, truncated at ``sigma + 0.5``
    pixels (so integer displacements copy pixels exactly). Blobs are weighted
    by ``exp(z)`` so nearer pixels win overlaps. The part of a blob within one
    pixel of its center is its core; the widened tail only paints pixels no
    core reaches, so stretched blobs fill disocclusions without bleeding over
    neighbours. Pixels no blob reaches take the nearest splatted value.
    """
    img = np.asarray(frame, dtype=np.float64)
    gray = img.ndim == 2
    if gray:
        img = img[..., None]
    h, w = img.shape[:2]
    d = np.asarray(displacement, dtype=np.float64)
    grad = np.zeros_like(d)
    if w > 1:
        fwd = np.abs(np.diff(d, axis=1))
        grad[:, :-1] = fwd
        grad[:, 1:] = np.maximum(grad[:, 1:], fwd)
    sigma_x = np.clip(grad, SPLAT_SIGMA_X_MIN, SPLAT_SIGMA_X_MAX)
    zw = np.exp(np.asarray(z, dtype=np.float64) - np.max(z))
    core_acc, tail_acc = np.zeros_like(img), np.zeros_like(img)
    core_w, tail_w = np.zeros((h, w)), np.zeros((h, w))
    _splat_rows(np.ascontiguousarray(img), np.ascontiguousarray(d), sigma_x, zw, core_acc, core_w, tail_acc, tail_w)
    core = core_w > 1e-300
    acc = np.where(core[..., None], core_acc, tail_acc)
    wsum = np.where(core, core_w, tail_w)
    hit = wsum > 1e-300
    out = np.where(hit[..., None], acc / np.where(hit, wsum, 1.0)[..., None], 0.0)
    if not hit.all():
        if not hit.any():
            raise ValueError("no pixel received a splat")
        _, (iy, ix) = ndimage.distance_transform_edt(~hit, return_indices=True)
        out = out[iy, ix]
    return out[..., 0] if gray else out


def render_stereo(frame: np.ndarray, W: np.ndarray, window: bool = True) -> StereoPair:
    """Left and right views with half the disparity each.

    With ``window=True`` the displacement is offset by the frame's maximum
    disparity, so the nearest object sits at zero disparity and everything
    else appears behind the screen.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.shape != np.shape(frame)[:2]:
        raise ValueError(f"disparity {W.shape} does not match frame {np.shape(frame)[:2]}")
    shift = float(W.max()) / 2.0 if window else 0.0
    half = W / 2.0 - shift
    z = (W - W.max()) / Z_TEMPERATURE
    left = splat_view(frame, half, z)
    right = splat_view(frame, -half, z)
    return StereoPair(left, right, shift)


def compose_anaglyph(pair: StereoPair) -> np.ndarray:
    """Red/cyan anaglyph: red from the left view, green and blue from the right."""
    left, right = pair.left, pair.right
    if left.ndim == 2:
        left = np.repeat(left[..., None], 3, axis=-1)
        right = np.repeat(right[..., None], 3, axis=-1)
    out = right.copy()
    out[..., 0] = left[..., 0]
    return out


def side_by_side(pair: StereoPair) -> np.ndarray:
    return np.concatenate([pair.left, pair.right], axis=1)


def interlaced(pair: StereoPair) -> np.ndarray:
    """Row-interleaved stereo: even rows from the left view, odd rows from the right."""
    out = pair.left.copy()
    out[1::2] = pair.right[1::2]
    return out
