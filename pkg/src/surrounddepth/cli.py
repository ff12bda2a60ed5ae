"""Command-line entry point: ``surrounddepth <subcommand> ...``.

JSON results go to stdout and diagnostics to stderr. Exit codes are 0 on
success, 1 for usage errors, 2 for unreadable or inconsistent data and 3
when a self-check fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cvt, evalmetrics, raster, sfm, synth
from ._backend import kernels
from .geometry import CameraRig, GeometryError, relative_pose, rig_from_dict, save_rig, translation
from .photometric import DepthMap, Image, warp_image

logger = logging.getLogger("surrounddepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config overrides ---------------------------------------------------------

_SECTIONS = {
    "rig": synth.RigSpec,
    "sfm": sfm.SfmConfig,
    "eval": evalmetrics.EvalConfig,
    "cvt": cvt.CvtConfig,
}
_SCENE_DEFAULTS = {"walls": 8, "near": 4.0, "far": 7.0, "camera_height": 1.5, "ceiling": 3.5, "cell": 0.4}


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"expected a {type(like).__name__}, got {raw!r}") from None
    return raw


def parse_overrides(items: list[str]) -> dict[str, dict]:
    """Turn ``section.key=value`` strings into typed per-section dicts."""
    out: dict[str, dict] = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} is not of the form section.key=value")
        if section == "scene":
            defaults = _SCENE_DEFAULTS
        elif section in _SECTIONS:
            defaults = {f.name: f.default for f in dataclasses.fields(_SECTIONS[section])
                        if f.default is not dataclasses.MISSING and f.default is not None}
        else:
            raise UsageError(f"unknown config section {section!r}")
        if name not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        out.setdefault(section, {})[name] = _coerce(raw.strip(), defaults[name])
    return out


def _build(section: str, overrides: dict, **extra):
    kwargs = {**overrides.get(section, {}), **extra}
    try:
        return _SECTIONS[section](**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- I/O helpers --------------------------------------------------------------


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_rig_checked(path) -> CameraRig:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"rig file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from None
    cams = d.get("cameras") if isinstance(d, dict) else None
    if isinstance(cams, list) and len(cams) < 2:
        raise UsageError(f"{p}: rig has {len(cams)} camera(s); at least 2 are required")
    try:
        return rig_from_dict(d)
    except (ValueError, GeometryError) as exc:
        raise DataError(f"{p}: {exc}") from None


def _view_name(view: int, step: int, ext: str) -> str:
    return f"view{view}_step{step}.{ext}"


def _read_depth_map(path) -> DepthMap:
    if not Path(path).is_file():
        raise DataError(f"depth raster not found: {path}")
    d, valid = raster.read_depth(path)
    return DepthMap(d, valid)


def _read_image(path) -> Image:
    if not Path(path).is_file():
        raise DataError(f"image not found: {path}")
    try:
        return Image(np.clip(raster.read_image(path), 0.0, 1.0))
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None


# -- subcommands --------------------------------------------------------------


def cmd_gen_synthetic(args, overrides) -> int:
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    spec = dataclasses.replace(synth.RigSpec(), **overrides.get("rig", {}))
    try:
        rig = synth.build_rig(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sc = {**_SCENE_DEFAULTS, **overrides.get("scene", {})}
    scene = synth.default_scene(args.seed, int(sc["walls"]), (sc["near"], sc["far"]),
                                sc["camera_height"], sc["ceiling"], sc["cell"])
    motion = translation(0.0, 0.0, args.forward)
    seq = synth.make_sequence(scene, rig, motion, args.steps)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rig(rig, out / "rig.json")
    for t, views in enumerate(seq.frames):
        for n, (img, depth) in enumerate(views):
            raster.write_image(out / _view_name(n, t, "img"), img.data)
            raster.write_depth(out / _view_name(n, t, "dpt"), depth.data, depth.valid)
    (out / "motion.json").write_text(json.dumps({
        "motion": seq.motion.matrix().reshape(-1).tolist(),
        "vehicle_poses": [V.matrix().reshape(-1).tolist() for V in seq.vehicle_poses],
    }, indent=2))
    logger.info("wrote %d views x %d steps to %s", len(rig), args.steps, out)
    _emit({"out": str(out), "views": len(rig), "steps": args.steps, "seed": args.seed})
    return EXIT_OK


def _inverse_depth_at(depth: DepthMap, pts: np.ndarray):
    """Bilinear inverse-depth lookup, exact on planar surfaces."""
    inv = np.where(depth.valid, 1.0 / np.where(depth.valid, depth.data, 1.0), 0.0)
    stack = np.stack([inv, depth.valid.astype(np.float64)], axis=-1)
    vals, inb = kernels.bilinear_sample(stack, pts[:, 0], pts[:, 1])
    ok = inb & (vals[:, 1] >= 1.0 - 1e-12) & (vals[:, 0] > 0)
    return np.where(ok, 1.0 / np.where(ok, vals[:, 0], 1.0), np.nan), ok


def cmd_pseudo_depth(args, overrides) -> int:
    data = Path(args.dataset)
    rig = _load_rig_checked(args.rig or data / "rig.json")
    extra = {"gamma": args.gamma} if args.gamma is not None else {}
    if args.matches:
        extra["detector"] = "file"
    cfg = _build("sfm", overrides, **extra)
    images = [_read_image(data / _view_name(n, args.step, "img")) for n in range(len(rig))]

    matches = None
    if args.matches:
        matches = {}
        for i, j in rig.adjacency:
            f = Path(args.matches) / f"matches_{i}_{j}.json"
            if f.is_file():
                try:
                    matches[(i, j)] = sfm.load_matches(f)
                except (ValueError, KeyError) as exc:
                    raise DataError(f"{f}: {exc}") from None
    try:
        pseudo = sfm.generate_pseudo_depths(rig, images, cfg, matches=matches)
    except ValueError as exc:
        raise DataError(str(exc)) from None

    out = Path(args.out) if args.out else data / "pseudo"
    out.mkdir(parents=True, exist_ok=True)
    summary = {"views": [], "total_points": 0}
    rel_errs, gts, preds = [], [], []
    for s in pseudo:
        sfm.save_pseudo_depth(s, out / f"pseudo_view{s.view}_step{args.step}.json")
        summary["views"].append({"view": s.view, "points": len(s)})
        summary["total_points"] += len(s)
        gt_path = data / _view_name(s.view, args.step, "dpt")
        if len(s) and gt_path.is_file():
            gt, ok = _inverse_depth_at(_read_depth_map(gt_path), s.points)
            rel_errs.append(np.abs(s.depth[ok] - gt[ok]) / gt[ok])
            gts.append(gt[ok])
            preds.append(s.depth[ok])
    if rel_errs:
        e = np.concatenate(rel_errs)
        summary["within_2pct"] = float(np.mean(e <= 0.02)) if e.size else None
        summary["median_rel_error"] = float(np.median(e)) if e.size else None
        if e.size:
            summary["scale_factor"] = float(np.median(np.concatenate(gts)) / np.median(np.concatenate(preds)))
        print(f"pseudo-depth: {summary['total_points']} points, "
              f"{100 * (summary['within_2pct'] or 0):.1f}% within 2% of ground truth", file=sys.stderr)
    _emit(summary)
    return EXIT_OK


def cmd_warp(args, overrides) -> int:
    rig = _load_rig_checked(args.rig)
    n = len(rig)
    for v in (args.src_view, args.tgt_view):
        if not 0 <= v < n:
            raise UsageError(f"view {v} out of range for a {n}-camera rig")
    src = _read_image(args.src_image)
    depth = _read_depth_map(args.tgt_depth)
    rel = relative_pose(rig, args.tgt_view, args.src_view)
    try:
        recon, mask = warp_image(src, depth, rig.cameras[args.tgt_view], rig.cameras[args.src_view], rel)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    raster.write_image(args.out, recon.data)
    report = {"out": str(args.out), "valid_fraction": float(mask.mean())}
    if args.tgt_image:
        tgt = _read_image(args.tgt_image)
        if tgt.data.shape != recon.data.shape:
            raise DataError("target image does not match the reconstruction")
        err = np.abs(tgt.data - recon.data).mean(axis=2)
        report["mean_abs_error"] = float(err[mask].mean()) if mask.any() else None
    _emit(report)
    return EXIT_OK


def cmd_evaluate(args, overrides) -> int:
    extra = {"median_scaling": False} if args.no_median_scaling else {}
    cfg = _build("eval", overrides, **extra)
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    if not gt_dir.is_dir() or not pred_dir.is_dir():
        raise DataError("prediction and ground-truth directories must exist")
    names = sorted(p.name for p in gt_dir.glob("*.dpt"))
    if not names:
        raise DataError(f"no .dpt files in {gt_dir}")
    results = []
    for name in names:
        gt = _read_depth_map(gt_dir / name)
        pred = _read_depth_map(pred_dir / name)
        try:
            results.append(evalmetrics.evaluate_depth(pred, gt, cfg))
        except ValueError as exc:
            raise DataError(f"{name}: {exc}") from None
    out = evalmetrics.mean_results(results).as_dict()
    out["files"] = len(results)
    _emit(out)
    return EXIT_OK


def cmd_consistency(args, overrides) -> int:
    rig = _load_rig_checked(args.rig)
    d = Path(args.depth_dir)
    depths = [_read_depth_map(d / _view_name(n, args.step, "dpt")) for n in range(len(rig))]
    if args.scale != 1.0:
        depths = [dm.scaled(args.scale) for dm in depths]
    try:
        report = evalmetrics.depth_consistency(rig, depths)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for p in report.pairs:
        if p.abs_rel is None:
            logger.warning("views %d and %d share no valid pixels", p.i, p.j)
    _emit(report.as_dict())
    return EXIT_OK


def cmd_cvt_check(args, overrides) -> int:
    for name in ("seeds", "views", "height", "width", "dim", "heads"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be positive")
    if args.dim % args.heads:
        raise UsageError("--dim must be divisible by --heads")
    runs = [
        cvt.gradient_check(seed, args.views, args.height, args.width, args.dim, args.heads,
                           corrupt=args.corrupt_backward)
        for seed in range(args.seed, args.seed + args.seeds)
    ]
    worst = max(r["max_rel_error"] for r in runs)
    passed = worst <= args.tolerance
    _emit({"max_rel_error": worst, "tolerance": args.tolerance, "passed": passed, "runs": runs})
    if not passed:
        print(f"cvt-check: gradient mismatch {worst:.3g} exceeds {args.tolerance:g}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override such as sfm.gamma=1.5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = _Parser(prog="surrounddepth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", parents=[common], help="render a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--forward", type=float, default=0.5, help="vehicle motion per step in metres")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pseudo-depth", parents=[common], help="sparse metric depth from cross-view matches")
    p.add_argument("dataset")
    p.add_argument("--rig", help="rig JSON (default: DATASET/rig.json)")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--gamma", type=float, help="epipolar threshold in pixels at the reference width")
    p.add_argument("--matches", help="directory of matches_I_J.json files to use instead of the matcher")
    p.add_argument("--out", help="output directory (default: DATASET/pseudo)")
    p.set_defaults(func=cmd_pseudo_depth)

    p = sub.add_parser("warp", parents=[common], help="reconstruct a target view from a source view")
    p.add_argument("--rig", required=True)
    p.add_argument("--src-view", type=int, required=True)
    p.add_argument("--tgt-view", type=int, required=True)
    p.add_argument("--src-image", required=True)
    p.add_argument("--tgt-depth", required=True)
    p.add_argument("--tgt-image", help="optional target image for an error report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("evaluate", parents=[common], help="depth metrics over matching .dpt files")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--no-median-scaling", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("consistency", parents=[common], help="cross-view depth consistency")
    p.add_argument("--rig", required=True)
    p.add_argument("depth_dir")
    p.add_argument("--step", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0, help="multiply every depth before scoring")
    p.set_defaults(func=cmd_consistency)

    p = sub.add_parser("cvt-check", parents=[common], help="finite-difference check of attention gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to check")
    p.add_argument("--views", type=int, default=2)
    p.add_argument("--height", type=int, default=2)
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_cvt_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.overrides)
        return args.func(args, overrides)
    except UsageError as exc:
        print(f"surrounddepth {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, raster.RasterFormatError) as exc:
        print(f"surrounddepth {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
