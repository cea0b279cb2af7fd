"""Depth error metrics, depth-range rescaling and PSNR."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imaging import DepthMap

PSNR_CAP = 99.0


@dataclass
class ErrorReport:
    rel: float
    log10: float
    rms: float
    pixel_count: int
    psnr: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _as_depth(d) -> DepthMap:
    return d if isinstance(d, DepthMap) else DepthMap.from_array(d)


def depth_errors(pred, truth, mask: np.ndarray | None = None) -> ErrorReport:
    """Mean relative, mean absolute log10 and RMS error over valid ground-truth pixels.

    Predictions must be positive wherever the ground truth is valid.
    """
    p = np.asarray(getattr(pred, "depth", pred), dtype=np.float64)
    t = _as_depth(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {t.shape} differ")
    valid = t.valid.copy()
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    pv, tv = p[valid], t.depth[valid]
    if np.any(~np.isfinite(pv)) or np.any(pv <= 0):
        raise ValueError("prediction must be finite and positive on valid pixels")
    diff = pv - tv
    return ErrorReport(
        rel=float(np.mean(np.abs(diff) / tv)),
        log10=float(np.mean(np.abs(np.log10(pv) - np.log10(tv)))),
        rms=float(np.sqrt(np.mean(diff**2))),
        pixel_count=int(valid.sum()),
    )


def rescale_depth_range(D, lo: float = 1.0, hi: float = 81.0) -> tuple[DepthMap, bool]:
    """Affinely map the valid range ``[min D, max D]`` onto ``[lo, hi]``.

    Returns the rescaled map and a flag that is True when ``D`` was constant
    (every valid pixel then maps to ``lo``).
    """
    if not hi > lo > 0:
        raise ValueError("need hi > lo > 0")
    d = _as_depth(D)
    if not d.valid.any():
        raise ValueError("depth map has no valid pixels")
    v = d.depth[d.valid]
    dmin, dmax = float(v.min()), float(v.max())
    if dmax - dmin <= 0:
        return DepthMap(np.where(d.valid, lo, d.depth), d.valid.copy()), True
    scaled = lo + (d.depth - dmin) * (hi - lo) / (dmax - dmin)
    scaled = np.where(d.valid, scaled, d.depth)
    return DepthMap(scaled, d.valid.copy()), False


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images give 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"images differ in size: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        sq = sq[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(sq))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
