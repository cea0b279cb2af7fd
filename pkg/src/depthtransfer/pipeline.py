"""End-to-end depth inference for a single image or a clip against an RGBD index."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import features, solver
from .correspondence import align_dense, warp_confidence
from .database import DEFAULT_K, CandidateSet, DatabaseIndex, select_candidates
from .depth_infer import (
    CandidateBundle,
    InferenceProblem,
    InferenceResult,
    ObjectiveWeights,
    flow_confidence,
    infer,
    initialize_depth,
)
from .imaging import resize_bilinear
from .motion_seg import TAU, contact_depth, segment_clip

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    k: int = DEFAULT_K
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    domain: str = "linear"
    omega: float = features.MATCH_OMEGA
    tau: float = TAU
    invert_flow_confidence: bool = False
    jobs: int = 1


@dataclass
class PreparedQuery:
    problem: InferenceProblem
    candidates: list[CandidateSet]
    motion_masks: list[np.ndarray] | None = None


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def prepare(index: DatabaseIndex, frames: list[np.ndarray], cfg: PipelineConfig | None = None) -> PreparedQuery:
    """Retrieve and align candidates for each frame and collect the clip-level cues."""
    cfg = cfg or PipelineConfig()
    if not frames:
        raise ValueError("no input frames")
    frames = [resize_bilinear(f, index.width, index.height) for f in frames]
    n = len(frames)

    flows = features.clip_flows(frames) if n > 1 else []
    flowfeats = features.clip_flow_features(frames, flows)
    gists = _map(features.compute_gist, frames, cfg.jobs)
    cand_sets = [select_candidates(index, g, f, cfg.k, cfg.omega) for g, f in zip(gists, flowfeats)]
    for t, cs in enumerate(cand_sets):
        if cs.shortfall:
            logger.warning("frame %d: only %d candidate clips available (asked for %d)", t, len(cs), cfg.k)

    qdesc = _map(features.compute_dense_descriptors, frames, cfg.jobs)
    needed = {id(c.record): c.record for cs in cand_sets for c in cs}
    cdesc = dict(
        zip(needed, _map(lambda r: features.compute_dense_descriptors(r.image), list(needed.values()), cfg.jobs))
    )

    def bundle(job):
        t, cand = job
        cd = cdesc[id(cand.record)]
        warp = align_dense(qdesc[t], cd)
        return t, CandidateBundle(warp, cand.record.depth, warp_confidence(qdesc[t], cd, warp))

    jobs = [(t, c) for t, cs in enumerate(cand_sets) for c in cs]
    bundles: list[list[CandidateBundle]] = [[] for _ in range(n)]
    for t, b in _map(bundle, jobs, cfg.jobs):
        bundles[t].append(b)

    wts = cfg.weights
    problem = InferenceProblem(
        frames, bundles, index.prior, wts, domain=cfg.domain, invert_flow_confidence=cfg.invert_flow_confidence
    )
    masks = None
    if n > 1:
        problem.flows = flows
        problem.flow_conf = flow_confidence(frames, flows, wts.mu_l, wts.sigma_l, cfg.invert_flow_confidence)
        if wts.eta > 0:
            seg = segment_clip(frames, cfg.tau)
            masks = seg.masks
            init = [initialize_depth(b, index.prior) for b in bundles]
            problem.motion_mask = masks
            problem.contact_depth = contact_depth(masks, init)
    return PreparedQuery(problem, cand_sets, masks)


def run(
    index: DatabaseIndex,
    frames: list[np.ndarray],
    cfg: PipelineConfig | None = None,
    solver_cfg: solver.SolverConfig | None = None,
    log_path=None,
) -> tuple[InferenceResult, PreparedQuery]:
    prepared = prepare(index, frames, cfg)
    return infer(prepared.problem, "median", solver_cfg, log_path=log_path), prepared
