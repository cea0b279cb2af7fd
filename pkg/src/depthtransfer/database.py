"""RGBD database: ingestion, feature indexing, candidate retrieval, depth prior."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features
from .fileio import (
    DataError,
    content_hash,
    read_depth,
    read_feature_cache,
    read_image,
    read_pfm,
    write_feature_cache,
    write_pfm,
)
from .imaging import DepthMap, resize_bilinear, resize_depth

logger = logging.getLogger(__name__)

DEFAULT_WIDTH = 160
DEFAULT_HEIGHT = 120
DEFAULT_K = 7
INDEX_FILE = "index.json"
INDEX_VERSION = 1


@dataclass
class RgbdRecord:
    image: np.ndarray
    depth: DepthMap
    clip_id: str
    frame_index: int
    gist: np.ndarray
    flowfeat: np.ndarray
    image_path: str = ""
    depth_path: str = ""
    feature_key: str = ""


@dataclass
class DatabaseIndex:
    records: list[RgbdRecord]
    width: int
    height: int
    prior: DepthMap | None = None

    def __post_init__(self):
        if self.prior is None and self.records:
            self.prior = compute_prior(self)

    @property
    def clip_ids(self) -> list[str]:
        return sorted({r.clip_id for r in self.records})


@dataclass
class Candidate:
    record: RgbdRecord
    score: float


@dataclass
class CandidateSet:
    candidates: list[Candidate] = field(default_factory=list)
    shortfall: bool = False

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def scores(self) -> list[float]:
        return [c.score for c in self.candidates]


def _load_manifest(manifest_path) -> list[dict]:
    path = Path(manifest_path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest ({exc})", path) from exc
    clips = data.get("clips", []) if isinstance(data, dict) else data
    if not clips:
        raise DataError("manifest lists no clips", path)
    return clips


def _frame_features(frames, cache_dir):
    """(gist, flow features, cache key) per frame, reusing the cache when present."""
    out = []
    for i, img in enumerate(frames):
        nxt = frames[i + 1] if i + 1 < len(frames) else None
        key = content_hash(img, nxt if nxt is not None else np.zeros(0))
        cached = None
        if cache_dir is not None:
            fpath = Path(cache_dir) / f"{key}.bin"
            if fpath.exists():
                try:
                    cached = read_feature_cache(fpath)
                except DataError:
                    logger.warning("ignoring unreadable feature cache %s", fpath)
        if cached is not None:
            gist, flowfeat = cached["gist"], cached["flow"]
        else:
            gist = features.compute_gist(img)
            if nxt is None:
                flowfeat = features.compute_flow_features(None, shape=img.shape[:2])
            else:
                flowfeat = features.compute_flow_features(features.compute_optical_flow(img, nxt))
            if cache_dir is not None:
                write_feature_cache(Path(cache_dir) / f"{key}.bin", {"gist": gist, "flow": flowfeat})
        out.append((gist, flowfeat, key))
    return out


def ingest_manifest(
    manifest_path,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    cache_dir=None,
) -> DatabaseIndex:
    """Build an index from a JSON manifest ``[{clip_id, frames: [{image, depth}]}]``.

    Paths are resolved relative to the manifest. Frames are resized to the
    working resolution; depth holes stay marked invalid. Frames whose depth is
    ``null`` still contribute to their neighbours' flow features but are not
    indexed.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    clips = _load_manifest(manifest_path)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)

    records = []
    for clip in clips:
        clip_id = str(clip["clip_id"])
        frames, depths, paths = [], [], []
        for entry in clip.get("frames", []):
            ipath = (base / entry["image"]).resolve()
            img = read_image(ipath)
            depth = None
            dpath = entry.get("depth")
            if dpath is not None:
                dpath = (base / dpath).resolve()
                depth = read_depth(dpath)
                if depth.shape != img.shape[:2]:
                    raise DataError(f"depth size {depth.shape} differs from image size {img.shape[:2]}", dpath)
                depth = resize_depth(depth, width, height)
            frames.append(resize_bilinear(img, width, height))
            depths.append(depth)
            paths.append((str(ipath), str(dpath) if dpath is not None else ""))
        feats = _frame_features(frames, cache_dir)
        for i, (img, depth, (ip, dp), (gist, flowfeat, key)) in enumerate(zip(frames, depths, paths, feats)):
            if depth is None:
                continue
            records.append(RgbdRecord(img, depth, clip_id, i, gist, flowfeat, ip, dp, key))
    if not records:
        raise DataError("manifest contains no frames with depth", manifest_path)
    logger.info("ingested %d frames from %d clips", len(records), len({r.clip_id for r in records}))
    return DatabaseIndex(records, width, height)


def save_index(index: DatabaseIndex, out_dir):
    """Write the index descriptor, per-frame feature caches and the prior."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in index.records:
        key = r.feature_key or content_hash(r.image)
        write_feature_cache(out / "features" / f"{key}.bin", {"gist": r.gist, "flow": r.flowfeat})
        entries.append(
            {
                "clip_id": r.clip_id,
                "frame_index": r.frame_index,
                "image": r.image_path,
                "depth": r.depth_path,
                "features": f"features/{key}.bin",
            }
        )
    write_pfm(out / "prior.pfm", np.where(index.prior.valid, index.prior.depth, 0.0))
    desc = {"version": INDEX_VERSION, "width": index.width, "height": index.height, "records": entries}
    (out / INDEX_FILE).write_text(json.dumps(desc, indent=1))


def load_index(index_dir) -> DatabaseIndex:
    index_dir = Path(index_dir)
    path = index_dir / INDEX_FILE
    try:
        desc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read index ({exc})", path) from exc
    w, h = desc["width"], desc["height"]
    records = []
    for e in desc["records"]:
        img = resize_bilinear(read_image(e["image"]), w, h)
        depth = resize_depth(read_depth(e["depth"]), w, h)
        feats = read_feature_cache(index_dir / e["features"])
        key = Path(e["features"]).stem
        records.append(
            RgbdRecord(
                img, depth, e["clip_id"], e["frame_index"], feats["gist"], feats["flow"], e["image"], e["depth"], key
            )
        )
    prior = DepthMap.from_array(read_pfm(index_dir / "prior.pfm"))
    return DatabaseIndex(records, w, h, prior)


def select_candidates(
    index: DatabaseIndex,
    gist: np.ndarray,
    flowfeat: np.ndarray,
    k: int = DEFAULT_K,
    omega: float = features.MATCH_OMEGA,
) -> CandidateSet:
    """The ``k`` best-scoring frames, at most one per clip.

    Ties are broken by ``(score, clip_id, frame_index)``. When the database
    has fewer than ``k`` clips every clip's best frame is returned and
    ``shortfall`` is set.
    """
    if not index.records:
        raise ValueError("cannot retrieve from an empty index")
    if k < 1:
        raise ValueError("k must be at least 1")
    scored = sorted(
        ((features.matching_score(gist, flowfeat, r.gist, r.flowfeat, omega), r) for r in index.records),
        key=lambda sr: (sr[0], sr[1].clip_id, sr[1].frame_index),
    )
    seen = set()
    chosen = []
    for score, rec in scored:
        if rec.clip_id in seen:
            continue
        seen.add(rec.clip_id)
        chosen.append(Candidate(rec, score))
        if len(chosen) == k:
            break
    return CandidateSet(chosen, shortfall=len(chosen) < k)


def compute_prior(index_or_records, domain: str = "linear") -> DepthMap:
    """Per-pixel mean of valid depth over all records.

    With ``domain="log"`` the mean is taken over log10 depth (a geometric
    mean); the result is in meters either way. Pixels never observed take the
    global mean.
    """
    records = index_or_records.records if isinstance(index_or_records, DatabaseIndex) else index_or_records
    if not records:
        raise ValueError("cannot compute a prior from an empty database")
    fwd, inv = _domain_maps(domain)
    total = np.zeros(records[0].depth.shape)
    count = np.zeros(records[0].depth.shape)
    for r in records:
        v = r.depth.valid
        total[v] += fwd(r.depth.depth[v])
        count[v] += 1
    if not count.any():
        raise ValueError("database has no valid depth samples")
    seen = count > 0
    mean = np.where(seen, total / np.maximum(count, 1), total[seen].sum() / count[seen].sum())
    return DepthMap(inv(mean), np.ones(mean.shape, dtype=bool))


def _domain_maps(domain: str):
    if domain == "linear":
        return (lambda d: d), (lambda d: d)
    if domain == "log":
        return np.log10, (lambda d: 10.0**d)
    raise ValueError(f"unknown depth domain {domain!r}")
