"""Depth objective assembly and inference for single images and clips.

The unknown is depth in the optimization domain (meters by default, log10
meters on request), stacked frame-major for clips. Every summand of the
objective becomes one :class:`~depthtransfer.solver.RobustTerm`:

* data: per candidate, ``w * phi(D - warped C)`` and ``gamma * w * phi(grad D - warped grad C)``
* smoothness: ``alpha * s * phi(grad D)`` with image-driven soft thresholds ``s``
* prior: ``beta * phi(D - P)``
* coherence (clips): ``nu * s_t * phi(D[t+1, p + flow] - D[t, p])``
* motion (clips): ``eta * m * phi(D - M)`` on moving-object pixels
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import solver
from .correspondence import WarpField, apply_warp
from .imaging import DepthMap, FlowField, sigmoid_weight, spatial_gradients, to_gray

logger = logging.getLogger(__name__)


@dataclass
class ObjectiveWeights:
    alpha: float = 10.0
    beta: float = 0.5
    gamma: float = 10.0
    nu: float = 100.0
    eta: float = 5.0
    mu_l: float = 0.05
    sigma_l: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "nu", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def scaled(self, factor: float) -> ObjectiveWeights:
        return ObjectiveWeights(
            self.alpha * factor,
            self.beta * factor,
            self.gamma * factor,
            self.nu * factor,
            self.eta * factor,
            self.mu_l,
            self.sigma_l,
        )


@dataclass
class CandidateBundle:
    """One retrieved candidate: its depth, the warp aligning it, and per-pixel confidence."""

    warp: WarpField
    depth: DepthMap
    confidence: np.ndarray

    def warped(self, domain: str = "linear") -> dict:
        """Warped depth and warped depth gradients, both in ``domain``."""
        d = DepthMap(to_domain(np.where(self.depth.valid, self.depth.depth, 1.0), domain), self.depth.valid)
        value, valid = apply_warp(self.warp, d, "value")
        gx, gy, vx, vy = apply_warp(self.warp, d, "gradient")
        return {"value": value, "valid": valid, "gx": gx, "gy": gy, "vx": vx, "vy": vy}


@dataclass
class InferenceProblem:
    frames: list[np.ndarray]
    bundles: list[list[CandidateBundle]]
    prior: DepthMap
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    flows: list[FlowField] | None = None
    flow_conf: list[np.ndarray] | None = None
    motion_mask: list[np.ndarray] | None = None
    contact_depth: list[np.ndarray] | None = None
    domain: str = "linear"
    invert_flow_confidence: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return to_gray(self.frames[0]).shape

    @property
    def n_frames(self) -> int:
        return len(self.frames)


@dataclass
class InferenceResult:
    depths: list[DepthMap]
    trace: list[float]
    solution: np.ndarray
    stack: solver.TermStack
    solve: solver.IRLSResult


def to_domain(depth, domain: str = "linear"):
    if domain == "log":
        return np.log10(depth)
    if domain == "linear":
        return np.asarray(depth, dtype=np.float64)
    raise ValueError(f"unknown depth domain {domain!r}")


def from_domain(x, domain: str = "linear"):
    if domain == "log":
        return 10.0**x
    if domain == "linear":
        return np.asarray(x, dtype=np.float64)
    raise ValueError(f"unknown depth domain {domain!r}")


def smoothness_weights(L: np.ndarray, mu_l: float = 0.05, sigma_l: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Soft thresholds ``(s_x, s_y)`` of the luma gradients: near 1 in flat areas, near 0 on edges."""
    gx, gy = spatial_gradients(to_gray(L))
    return sigmoid_weight(np.abs(gx), mu_l, sigma_l), sigmoid_weight(np.abs(gy), mu_l, sigma_l)


def reprojection_error(a: np.ndarray, b: np.ndarray, flow: FlowField) -> np.ndarray:
    """``|L_b(round(p + flow)) - L_a(p)|``; ``inf`` where the target leaves the frame."""
    la, lb = to_gray(a), to_gray(b)
    src, dst = solver.rounded_flow_targets(flow)
    err = np.full(la.size, np.inf)
    err[src] = np.abs(lb.ravel()[dst] - la.ravel()[src])
    return err.reshape(la.shape)


def flow_confidence(frames, flows, mu_l: float = 0.05, sigma_l: float = 0.01, invert_flow_confidence: bool = False):
    """Temporal weights ``s_t`` for each consecutive frame pair.

    By default the weight decreases with reprojection error (high where the
    flow is trustworthy). ``invert_flow_confidence=True`` flips the sigmoid argument.
    Pixels whose flow leaves the frame get weight 0.
    """
    if len(flows) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}")
    out = []
    for t, flow in enumerate(flows):
        err = reprojection_error(frames[t], frames[t + 1], flow)
        finite = np.isfinite(err)
        e = np.where(finite, err, 0.0)
        s = sigmoid_weight(-e, -mu_l, sigma_l) if invert_flow_confidence else sigmoid_weight(e, mu_l, sigma_l)
        out.append(np.where(finite, s, 0.0))
    return out


class FrameOperators:
    """Per-frame selection and gradient operators for a stacked unknown."""

    def __init__(self, h: int, w: int, n_frames: int):
        self.h, self.w, self.n = h, w, n_frames
        self.npix = h * w
        gx, gy = solver.grad_x(h, w), solver.grad_y(h, w)
        self.sel = [solver.frame_select(n_frames, t, self.npix) for t in range(n_frames)]
        self.gx = [solver.compose(gx, s) for s in self.sel]
        self.gy = [solver.compose(gy, s) for s in self.sel]
        cols = np.arange(w)[None, :].repeat(h, 0)
        rows = np.arange(h)[:, None].repeat(w, 1)
        self.has_x = (cols < w - 1).ravel().astype(np.float64)
        self.has_y = (rows < h - 1).ravel().astype(np.float64)


def _frame_terms(problem: InferenceProblem, t: int, ops: FrameOperators) -> list[solver.RobustTerm]:
    wts = problem.weights
    bundles = problem.bundles[t]
    if not bundles:
        raise ValueError(f"frame {t} has no candidates")
    terms = []
    for j, b in enumerate(bundles):
        warped = b.warped(problem.domain)
        conf = np.asarray(b.confidence, dtype=np.float64).ravel()
        terms.append(
            solver.RobustTerm(ops.sel[t], warped["value"], conf * warped["valid"].ravel(), name=f"data[{t},{j}]")
        )
        if wts.gamma > 0:
            terms.append(
                solver.RobustTerm(
                    ops.gx[t],
                    warped["gx"],
                    conf * warped["vx"].ravel() * ops.has_x,
                    multiplier=wts.gamma,
                    name=f"grad_x[{t},{j}]",
                )
            )
            terms.append(
                solver.RobustTerm(
                    ops.gy[t],
                    warped["gy"],
                    conf * warped["vy"].ravel() * ops.has_y,
                    multiplier=wts.gamma,
                    name=f"grad_y[{t},{j}]",
                )
            )
    if wts.alpha > 0:
        sx, sy = smoothness_weights(problem.frames[t], wts.mu_l, wts.sigma_l)
        terms.append(
            solver.RobustTerm(ops.gx[t], 0.0, sx.ravel() * ops.has_x, multiplier=wts.alpha, name=f"smooth_x[{t}]")
        )
        terms.append(
            solver.RobustTerm(ops.gy[t], 0.0, sy.ravel() * ops.has_y, multiplier=wts.alpha, name=f"smooth_y[{t}]")
        )
    if wts.beta > 0:
        prior = to_domain(np.where(problem.prior.valid, problem.prior.depth, 1.0), problem.domain)
        terms.append(
            solver.RobustTerm(
                ops.sel[t], prior, problem.prior.valid.astype(np.float64), multiplier=wts.beta, name=f"prior[{t}]"
            )
        )
    return terms


def assemble_single(problem: InferenceProblem, frame_idx: int = 0) -> solver.TermStack:
    """Objective of one frame on its own (unknown = that frame's pixels)."""
    h, w = problem.shape
    ops = FrameOperators(h, w, 1)
    sub = InferenceProblem(
        [problem.frames[frame_idx]], [problem.bundles[frame_idx]], problem.prior, problem.weights, domain=problem.domain
    )
    stack = solver.TermStack(h * w)
    for term in _frame_terms(sub, 0, ops):
        stack.add(term)
    return stack


def assemble_video(problem: InferenceProblem) -> solver.TermStack:
    """Joint objective over all frames: per-frame terms plus coherence and motion terms."""
    n = problem.n_frames
    if n == 1:
        return assemble_single(problem, 0)
    if len(problem.bundles) != n:
        raise ValueError(f"{n} frames but {len(problem.bundles)} candidate lists")
    h, w = problem.shape
    ops = FrameOperators(h, w, n)
    wts = problem.weights
    stack = solver.TermStack(n * h * w)
    for t in range(n):
        for term in _frame_terms(problem, t, ops):
            stack.add(term)

    if wts.nu > 0:
        if problem.flows is None or len(problem.flows) != n - 1:
            raise ValueError(f"{n} frames need {n - 1} flows")
        conf = problem.flow_conf
        if conf is None:
            conf = flow_confidence(problem.frames, problem.flows, wts.mu_l, wts.sigma_l, problem.invert_flow_confidence)
        for t, flow in enumerate(problem.flows):
            op = solver.flow_difference(flow, t, n)
            stack.add(solver.RobustTerm(op, 0.0, conf[t].ravel()[op.rows], multiplier=wts.nu, name=f"coherence[{t}]"))

    if wts.eta > 0 and problem.motion_mask is not None and problem.contact_depth is not None:
        mask = np.stack(problem.motion_mask).astype(bool)
        contact = np.stack(problem.contact_depth).astype(np.float64)
        mask &= np.isfinite(contact) & (contact > 0)
        if mask.any():
            op = solver.mask_select(mask)
            target = to_domain(contact[mask], problem.domain)
            stack.add(solver.RobustTerm(op, target, 1.0, multiplier=wts.eta, name="motion"))
    return stack


def _warped_stack(bundles: list[CandidateBundle]) -> np.ndarray:
    vals = []
    for b in bundles:
        v, ok = apply_warp(b.warp, b.depth, "value")
        vals.append(np.where(ok, v, np.nan))
    return np.stack(vals)


def initialize_depth(bundles: list[CandidateBundle], prior: DepthMap) -> DepthMap:
    """Per-pixel median of the valid warped candidate depths (meters).

    Even counts average the two middle values; pixels no candidate covers take
    the prior.
    """
    if not bundles:
        raise ValueError("need at least one candidate")
    vals = _warped_stack(bundles)
    covered = np.isfinite(vals).any(axis=0)
    with np.errstate(all="ignore"):
        med = np.nanmedian(np.where(covered[None], vals, 0.0), axis=0)
    return DepthMap(np.where(covered, med, prior.depth), np.ones(covered.shape, dtype=bool))


def initial_guess(problem: InferenceProblem, method="median", seed: int = 0) -> np.ndarray:
    """Starting point in the optimization domain, stacked over frames.

    ``method`` is ``"median"``, ``"mean"``, ``"dataset"`` (the prior),
    ``"random"`` (uniform between the extreme candidate depths), or an array
    of depths in meters.
    """
    if not isinstance(method, str):
        return to_domain(np.asarray(method, dtype=np.float64), problem.domain).ravel()
    prior = problem.prior
    rng = np.random.default_rng(seed)
    out = []
    for bundles in problem.bundles:
        if method == "median":
            d = initialize_depth(bundles, prior).depth
        elif method == "mean":
            vals = _warped_stack(bundles)
            covered = np.isfinite(vals).any(axis=0)
            with np.errstate(all="ignore"):
                d = np.where(covered, np.nanmean(np.where(covered[None], vals, 0.0), axis=0), prior.depth)
        elif method == "dataset":
            d = prior.depth
        elif method == "random":
            vals = _warped_stack(bundles)
            lo, hi = np.nanmin(vals), np.nanmax(vals)
            lo_d, hi_d = to_domain(lo, problem.domain), to_domain(hi, problem.domain)
            out.append(rng.uniform(lo_d, hi_d, size=prior.depth.shape).ravel())
            continue
        else:
            raise ValueError(f"unknown initialization {method!r}")
        out.append(to_domain(d, problem.domain).ravel())
    return np.concatenate(out)


def infer(
    problem: InferenceProblem, init="median", cfg: solver.SolverConfig | None = None, log_path=None, seed: int = 0
) -> InferenceResult:
    """Assemble the (video) objective, run IRLS, and return per-frame depth in meters."""
    stack = assemble_video(problem) if problem.n_frames > 1 else assemble_single(problem, 0)
    x0 = initial_guess(problem, init, seed)
    res = solver.irls_minimize(stack, x0, cfg, log_path=log_path)
    h, w = problem.shape
    depths = [
        DepthMap(
            from_domain(res.x[t * h * w : (t + 1) * h * w].reshape(h, w), problem.domain), np.ones((h, w), dtype=bool)
        )
        for t in range(problem.n_frames)
    ]
    return InferenceResult(depths, res.trace, res.x, stack, res)
