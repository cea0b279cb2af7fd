"""Command-line interface.

Subcommands: ``ingest``, ``infer``, ``segment``, ``stereo`` and ``eval``.
Every flag can also come from a JSON ``--config`` file, either as a flat
mapping or under a key named after the subcommand; explicit flags win.

Exit codes: 0 success, 2 usage error, 3 data error, 4 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, fileio, metrics, solver
from .database import DEFAULT_HEIGHT, DEFAULT_WIDTH, ingest_manifest, load_index, save_index
from .depth_infer import ObjectiveWeights
from .features import clip_flows
from .imaging import DepthMap, resize_bilinear
from .motion_seg import TAU, segment_clip, write_homographies
from .pipeline import PipelineConfig, run
from .stereo_synth import (
    LAMBDA,
    MU,
    WMAX_AT_640,
    compose_anaglyph,
    depth_to_disparity,
    interlaced,
    optimize_disparity,
    render_stereo,
    saliency_weights,
    scaled_wmax,
    side_by_side,
)

logger = logging.getLogger("depthtransfer")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SOLVER = 4


class NonConvergence(Exception):
    pass


def _inputs(path) -> list[Path]:
    """A single image file, or the sorted images of a directory."""
    path = Path(path)
    if path.is_dir():
        files = fileio.list_images(path)
        if not files:
            raise fileio.DataError("directory contains no images", path)
        return files
    if not path.exists():
        raise fileio.DataError("input not found", path)
    return [path]


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    out = Path(args.out)
    index = ingest_manifest(args.manifest, args.width, args.height, cache_dir=out / "cache")
    save_index(index, out)
    print(f"indexed {len(index.records)} frames from {len(index.clip_ids)} clips into {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    index = load_index(args.index)
    paths = _inputs(args.input)
    frames = [fileio.read_image(p) for p in paths]
    weights = ObjectiveWeights(args.alpha, args.beta, args.gamma, args.nu, args.eta)
    cfg = PipelineConfig(
        k=args.k,
        weights=weights,
        domain=args.domain,
        tau=args.tau,
        invert_flow_confidence=args.invert_flow_confidence,
        jobs=args.jobs,
    )
    scfg = solver.SolverConfig(irls_iters=args.irls_iters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, prepared = run(index, frames, cfg, scfg, log_path=out / "convergence.csv")
    for p, d in zip(paths, result.depths):
        fileio.write_depth(out / p.stem, d)
        fileio.write_image(out / f"{p.stem}_viz.png", fileio.depth_visualization(d.depth))
    if prepared.motion_masks is not None:
        for p, m in zip(paths, prepared.motion_masks):
            fileio.write_mask(out / f"{p.stem}_motion.png", m)
    trace = result.trace
    print(f"inferred {len(paths)} frame(s); objective {trace[0]:.6g} -> {trace[-1]:.6g} in {len(trace) - 1} iterations")
    if not result.solve.converged:
        raise NonConvergence(f"inner solve stopped at residual {result.solve.pcg_residuals[-1]:.2e}")
    return EXIT_OK


def cmd_segment(args) -> int:
    paths = _inputs(args.clip)
    frames = [fileio.read_image(p) for p in paths]
    if len({f.shape for f in frames}) != 1:
        raise fileio.DataError("clip frames differ in size", args.clip)
    seg = segment_clip(frames, args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, m in zip(paths, seg.masks):
        fileio.write_mask(out / f"{p.stem}.png", m)
    write_homographies(out / "homographies.csv", seg.homographies)
    flagged = [i for i, f in enumerate(seg.low_confidence) if f]
    print(f"segmented {len(paths)} frames (reference {seg.reference}); low-confidence frames: {flagged or 'none'}")
    return EXIT_OK


def _depth_files(directory) -> list[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    files = sorted(directory.glob("*.pfm"))
    if not files:
        raise fileio.DataError("no .pfm depth maps found", directory)
    return files


def _image_for(stem: str, images: list[Path], k: int, n: int) -> Path:
    for p in images:
        if p.stem == stem:
            return p
    if len(images) == n:
        return images[k]
    raise fileio.DataError(f"no input image for depth map {stem!r}", stem)


def cmd_stereo(args) -> int:
    depth_paths = _depth_files(args.depth)
    images = _inputs(args.input)
    depths = [fileio.read_depth(p) for p in depth_paths]
    h, w = depths[0].shape
    if any(d.shape != (h, w) for d in depths):
        raise fileio.DataError("depth maps differ in size", args.depth)
    frames = [
        resize_bilinear(fileio.read_image(_image_for(p.stem, images, k, len(depth_paths))), w, h)
        for k, p in enumerate(depth_paths)
    ]
    wmax = scaled_wmax(args.wmax, w)
    W0 = [depth_to_disparity(d, wmax) for d in depths]
    ls = [saliency_weights(f, w0, wmax) for f, w0 in zip(frames, W0)]
    flows = clip_flows(frames) if len(frames) > 1 and args.mu > 0 else None
    W = optimize_disparity(W0, ls, frames, args.lam, args.mu, flows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, f, wk in zip(depth_paths, frames, W):
        pair = render_stereo(f, wk, window=not args.no_window)
        if args.format == "anaglyph":
            fileio.write_image(out / f"{p.stem}_anaglyph.png", compose_anaglyph(pair))
        elif args.format == "sbs":
            fileio.write_image(out / f"{p.stem}_sbs.png", side_by_side(pair))
            fileio.write_image(out / f"{p.stem}_left.png", pair.left)
            fileio.write_image(out / f"{p.stem}_right.png", pair.right)
        else:
            fileio.write_image(out / f"{p.stem}_interlaced.png", interlaced(pair))
    print(f"rendered {len(depth_paths)} stereo frame(s) as {args.format} (W_max {wmax:.2f}px)")
    return EXIT_OK


def _parse_range(text: str):
    if text.lower() == "none":
        return None
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LO:HI or 'none', got {text!r}") from exc
    if not hi > lo > 0:
        raise argparse.ArgumentTypeError("range needs HI > LO > 0")
    return lo, hi


def _truth_for(stem: str, truth_dir: Path) -> Path:
    for suffix in (".pfm", ".png"):
        for name in (stem, stem.removesuffix("_mm")):
            p = truth_dir / f"{name}{suffix}"
            if p.exists():
                return p
    raise fileio.DataError(f"no ground truth for {stem!r}", truth_dir)


def cmd_eval(args) -> int:
    truth_dir = Path(args.truth)
    preds = _depth_files(args.pred)
    frames = {}
    for p in preds:
        pred = fileio.read_depth(p)
        truth = fileio.read_depth(_truth_for(p.stem, truth_dir) if truth_dir.is_dir() else truth_dir)
        pd = pred.depth
        if pred.shape != truth.shape:
            pd = resize_bilinear(pd, truth.shape[1], truth.shape[0])
        if args.rescale is not None:
            lo, hi = args.rescale
            truth, flat_t = metrics.rescale_depth_range(truth, lo, hi)
            scaled, flat_p = metrics.rescale_depth_range(DepthMap(pd, np.ones(pd.shape, dtype=bool)), lo, hi)
            pd = scaled.depth
            if flat_t or flat_p:
                logger.warning("%s: constant depth map during rescaling", p.stem)
        frames[p.stem] = metrics.depth_errors(pd, truth).as_dict()
    keys = ("rel", "log10", "rms")
    mean = {k: float(np.mean([f[k] for f in frames.values()])) for k in keys}
    report = {"frames": frames, "mean": mean, "count": len(frames), "rescale": args.rescale}
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text)
    print(" ".join(f"{k}={mean[k]:.4f}" for k in keys) + f" over {len(frames)} frame(s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthtransfer", description="Depth transfer from an RGBD database.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file with default flag values")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="index an RGBD database from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--height", type=int, default=DEFAULT_HEIGHT)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("infer", help="infer depth for an image or a clip directory")
    p.add_argument("--index", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--nu", type=float, default=100.0)
    p.add_argument("--eta", type=float, default=5.0)
    p.add_argument("--tau", type=float, default=TAU)
    p.add_argument("--domain", choices=("linear", "log"), default="linear")
    p.add_argument(
        "--invert-flow-confidence", action="store_true", help="flow confidence increasing in reprojection error"
    )
    p.add_argument("--irls-iters", type=int, default=30)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("segment", help="moving-object masks for a clip directory")
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=TAU)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("stereo", help="synthesize stereo views from inferred depth")
    p.add_argument("--depth", required=True, help="directory of .pfm depth maps (or one file)")
    p.add_argument("--input", required=True, help="the matching image or clip directory")
    p.add_argument("--out", required=True)
    p.add_argument("--wmax", type=float, default=WMAX_AT_640, help="maximum disparity in pixels at 640px width")
    p.add_argument("--lambda", dest="lam", type=float, default=LAMBDA)
    p.add_argument("--mu", type=float, default=MU)
    p.add_argument("--format", choices=("anaglyph", "sbs", "interlaced"), default="anaglyph")
    p.add_argument("--no-window", action="store_true", help="skip the zero-disparity window shift")
    p.set_defaults(func=cmd_stereo)

    p = sub.add_parser("eval", help="depth error metrics against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--rescale", type=_parse_range, default=_parse_range("1:81"), help="LO:HI in meters, or 'none'")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        config = json.loads(Path(known.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise fileio.DataError(f"cannot read config ({exc})", known.config) from exc
    if not isinstance(config, dict):
        raise fileio.DataError("config must be a JSON object", known.config)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in subparsers.choices.items():
        dests = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict)}
        values.update({k.replace("-", "_"): v for k, v in config.get(name, {}).items()})
        values = {("lam" if k == "lambda" else k): v for k, v in values.items()}
        if "rescale" in values and isinstance(values["rescale"], str):
            values["rescale"] = _parse_range(values["rescale"])
        sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
        # flags satisfied by the config are no longer mandatory
        for a in sp._actions:
            if a.dest in values:
                a.required = False


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except fileio.DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (fileio.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonConvergence, solver.SolverError) as exc:
        print(f"error: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
