"""
Command-line front end for panodepth.

Every subcommand prints a JSON report on stdout (echoing its resolved
configuration) and writes any artifacts to the paths it is given.

Exit codes: 0 success, 1 any panodepth error or failed check, 2 usage error.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

# Add src to path
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from config import RuntimeSettings, load_loss_config, load_pipeline_config
from core import RangeThreshold, apply_range_mask, gt_range_mask
from curation import run_pipeline
from depth_io import (
    DEFAULT_PNG_SCALE,
    DepthFileFormat,
    infer_format,
    read_depth,
    read_mask,
    write_depth,
    write_mask,
    write_pointcloud,
    write_raw_array,
    write_report,
)
from errors import ArgumentError, PanoDepthError
from geometry import ErpGrid, backproject, distortion_map, normals_from_depth
from gradcheck import DEFAULT_TOLERANCE, create_loss_registry, finite_difference_check, make_instance
from losses import total_loss
from metrics import Aggregation, EvalConfig, aggregate, evaluate_batch, evaluate_range_sweep_batch
from reproject import DEFAULT_FOV_DEG, DEFAULT_PATCH_SIZE, erp_to_perspective, icosahedron_rig

LOGGER = logging.getLogger("panodepth")

DEPTH_SUFFIXES = (".pfm", ".png", ".raw", ".f32", ".bin")


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read(path: str, png_scale: float):
    return read_depth(path, infer_format(path, png_scale))


def _settings_dict(settings: RuntimeSettings) -> dict:
    return {"seed": settings.seed, "threads": settings.threads}


# ==============================================================================
# EVAL
# ==============================================================================

def _depth_files(directory: Path) -> Dict[str, Path]:
    if not directory.is_dir():
        raise ArgumentError(f"Not a directory: {directory}")
    files = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in DEPTH_SUFFIXES and path.stem not in files:
            files[path.stem] = path
    return files


def pair_by_stem(pred_dir: Path, gt_dir: Path) -> Tuple[List[Tuple[str, Path, Path]], List[str]]:
    """Matching (stem, pred, gt) triples plus the stems present on one side only."""
    preds = _depth_files(pred_dir)
    gts = _depth_files(gt_dir)
    common = sorted(set(preds) & set(gts))
    unmatched = sorted(set(preds) ^ set(gts))
    return [(stem, preds[stem], gts[stem]) for stem in common], unmatched


def _evaluate_pairs(stems, maps, cfg: EvalConfig, settings, verbose: bool):
    """Evaluate in parallel; images emptied by a filter are reported as skipped."""
    results = evaluate_batch(maps, cfg, workers=settings.threads, verbose=verbose, skip_empty=True)
    kept = [(stem, r) for stem, r in zip(stems, results) if r is not None]
    skipped = [{"image": stem, "reason": "emptied by evaluation filters"} for stem, r in zip(stems, results) if r is None]
    return [r for _, r in kept], [stem for stem, _ in kept], skipped


def cmd_eval(args, settings: RuntimeSettings) -> Tuple[dict, int]:
    pairs, unmatched = pair_by_stem(Path(args.pred_dir), Path(args.gt_dir))
    if not pairs:
        raise ArgumentError(f"No prediction/ground-truth files share a filename stem ({len(unmatched)} unmatched).")

    stems = [stem for stem, _, _ in pairs]
    maps = [(_read(str(p), args.png_scale), _read(str(g), args.png_scale)) for _, p, g in pairs]
    cfg = EvalConfig(min_depth=args.min_depth, max_depth=args.max_depth, latitude_weighted=args.latitude_weighted)
    mode = Aggregation(args.aggregation)

    reports, kept, skipped = _evaluate_pairs(stems, maps, cfg, settings, args.verbose > 0)
    if not reports:
        raise ArgumentError("Every image was emptied by the evaluation filters.")

    payload = {
        "n_images": len(reports),
        "per_image": {stem: r.to_dict() for stem, r in zip(kept, reports)},
        "aggregate": aggregate(reports, mode).to_dict(),
        "skipped": [{"image": stem, "reason": "no matching file"} for stem in unmatched] + skipped,
        "config": {**cfg.to_dict(), "aggregation": mode.value, "png_scale": args.png_scale, **_settings_dict(settings)},
    }

    if args.range_sweep:
        sweep = evaluate_range_sweep_batch(maps, cfg=cfg, mode=mode, workers=settings.threads)
        payload["range_sweep"] = {f"{t:g}": r.to_dict() if r else None for t, r in sweep.items()}

    if args.out:
        write_report(payload, args.out)
    return payload, 0


# ==============================================================================
# LOSS / GRADCHECK
# ==============================================================================

def cmd_loss(args, settings: RuntimeSettings) -> Tuple[dict, int]:
    config = load_loss_config(args.config, args.preset)
    if args.no_distortion:
        config.use_distortion = False

    pred = _read(args.pred, args.png_scale)
    gt = _read(args.gt, args.png_scale)
    pred_mask = read_mask(args.pred_mask) if args.pred_mask else None
    if args.gt_mask:
        gt_mask = read_mask(args.gt_mask)
    elif pred_mask is not None and args.mask_threshold is not None:
        gt_mask = gt_range_mask(gt, RangeThreshold(args.mask_threshold))
    else:
        gt_mask = None

    report = total_loss(pred, gt, pred_mask, gt_mask, config=config)
    payload = report.to_dict()
    payload["config"] = {**config.to_dict(), **_settings_dict(settings)}

    if args.grad_out:
        write_raw_array(report.gradient.astype(np.float32), args.grad_out)
        payload["gradient_path"] = str(args.grad_out)
    if args.mask_grad_out and report.mask_gradient is not None:
        write_raw_array(report.mask_gradient.astype(np.float32), args.mask_grad_out)
        payload["mask_gradient_path"] = str(args.mask_grad_out)
    return payload, 0


def cmd_gradcheck(args, settings: RuntimeSettings) -> Tuple[dict, int]:
    config = load_loss_config(args.config, args.preset)
    terms, registry = create_loss_registry(config)
    selected = terms if args.loss == "all" else [registry[args.loss]]

    instance = make_instance(height=args.height, width=args.width, seed=settings.seed, patch_size=args.patch_size, config=config)
    reports = [finite_difference_check(term, instance, tolerance=args.tolerance) for term in selected]
    passed = all(r.passed for r in reports)
    payload = {
        "passed": passed,
        "results": [r.to_dict() for r in reports],
        "config": {
            "loss": args.loss,
            "height": args.height,
            "width": args.width,
            "patch_size": args.patch_size,
            "tolerance": args.tolerance,
            **_settings_dict(settings),
        },
    }
    return payload, 0 if passed else 1


# ==============================================================================
# GEOMETRY / REPROJECT
# ==============================================================================

def cmd_distortion_map(args, settings) -> Tuple[dict, int]:
    dmap = distortion_map(ErpGrid(width=args.width, height=args.height))
    payload = {
        "mean": float(dmap.weights.mean()),
        "min": float(dmap.weights.min()),
        "max": float(dmap.weights.max()),
        "config": {"width": args.width, "height": args.height},
    }
    if args.out:
        write_raw_array(dmap.weights.astype(np.float32), args.out)
        payload["path"] = str(args.out)
    return payload, 0


def cmd_pointcloud(args, settings) -> Tuple[dict, int]:
    depth = _read(args.input, args.png_scale)
    n_points = write_pointcloud(backproject(depth), args.out)
    return {"n_points": n_points, "path": str(args.out), "config": {"input": args.input}}, 0


def cmd_normals(args, settings) -> Tuple[dict, int]:
    depth = _read(args.input, args.png_scale)
    normals = normals_from_depth(depth)
    write_raw_array(normals.normals.astype(np.float32), args.out)
    return {
        "n_valid": int(normals.valid.sum()),
        "path": str(args.out),
        "config": {"input": args.input},
    }, 0


def cmd_rangemask(args, settings) -> Tuple[dict, int]:
    depth = _read(args.input, args.png_scale)
    threshold = RangeThreshold(args.threshold)
    mask = gt_range_mask(depth, threshold)
    write_mask(mask, args.out)
    payload = {
        "inside_fraction": float(mask.values.mean()),
        "n_inside": int(mask.as_bool().sum()),
        "path": str(args.out),
        "config": {"input": args.input, "threshold": threshold.meters, "preset": threshold.is_preset},
    }
    if args.masked_out:
        write_depth(apply_range_mask(depth, mask), args.masked_out, infer_format(args.masked_out, args.png_scale))
        payload["masked_path"] = str(args.masked_out)
    return payload, 0


def cmd_reproject_ico(args, settings) -> Tuple[dict, int]:
    depth = _read(args.input, args.png_scale)
    rig = icosahedron_rig(args.fov, args.size, allow_gaps=args.allow_gaps)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    fmt = DepthFileFormat(kind=args.format, scale=args.png_scale)
    suffix = {"pfm": ".pfm", "png16": ".png", "rawf32": ".raw"}[args.format]
    files = []
    for index, cam in enumerate(rig):
        patch = erp_to_perspective(depth, cam)
        path = out_dir / f"patch_{index:02d}{suffix}"
        write_depth(patch.as_depth_map(), path, fmt)
        files.append(str(path))

    description = rig.describe()
    write_report(description, out_dir / "rig.json")
    return {
        "files": files,
        "rig_path": str(out_dir / "rig.json"),
        "config": {"fov_deg": args.fov, "size": args.size, "allow_gaps": args.allow_gaps, "format": args.format},
    }, 0


# ==============================================================================
# CURATE / REFERENCE
# ==============================================================================

def cmd_curate(args, settings: RuntimeSettings) -> Tuple[dict, int]:
    cfg = load_pipeline_config(
        args.config,
        seed=args.seed,
        workers=args.threads,
        default_seed=settings.seed,
        default_workers=settings.threads,
    )
    result = run_pipeline(cfg, force=args.force)
    payload = result.to_dict()
    payload["config"] = {
        "config_path": str(args.config),
        "output_dir": str(cfg.output_dir),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "force": args.force,
    }
    return payload, 0


def render_reference(parser: argparse.ArgumentParser) -> str:
    """Markdown rendering of the full argparse tree."""
    sections = ["# panodepth CLI reference", "", "Generated by `python cli.py reference`.", ""]

    def walk(p: argparse.ArgumentParser, title: str):
        sections.extend([f"## `{title}`", "", "```", p.format_help().rstrip(), "```", ""])
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                for name, sub in action.choices.items():
                    walk(sub, f"{title} {name}")

    walk(parser, parser.prog)
    return "\n".join(sections)


def cmd_reference(args, settings) -> Tuple[dict, int]:
    text = render_reference(build_parser())
    if args.out:
        Path(args.out).write_text(text)
        return {"path": str(args.out)}, 0
    print(text)
    return None, 0


# ==============================================================================
# PARSER
# ==============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cli.py",
        description="Panoramic metric depth toolkit: losses, metrics, geometry and curation.",
    )
    parser.add_argument("--threads", type=int, default=None, help="Worker count (env PANODEPTH_THREADS, default 1)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (env PANODEPTH_SEED, default 0)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging")
    parser.add_argument("--png-scale", type=float, default=DEFAULT_PNG_SCALE, help="PNG16 counts per meter")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("eval", help="Evaluate prediction files against ground truth, paired by filename stem")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--min-depth", type=float, default=0.01)
    p.add_argument("--max-depth", type=float, default=None, help="Truncate ground truth at this distance")
    p.add_argument("--latitude-weighted", action="store_true")
    p.add_argument("--aggregation", choices=[m.value for m in Aggregation], default=Aggregation.MEAN_OF_IMAGES.value)
    p.add_argument("--range-sweep", action="store_true", help="Also report 10/20/50/100 m truncations")
    p.add_argument("--out", default=None, help="Also write the report here")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("loss", help="Compute all loss terms and the weighted total")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--config", default=None, help="Loss config (TOML or JSON)")
    p.add_argument("--preset", default=None, help="silog-only | distortion | geometry | full")
    p.add_argument("--no-distortion", action="store_true")
    p.add_argument("--pred-mask", default=None, help="8-bit PNG soft mask")
    p.add_argument("--gt-mask", default=None, help="8-bit PNG hard mask")
    p.add_argument("--mask-threshold", type=float, default=None, help="Derive the gt mask from gt at this range")
    p.add_argument("--grad-out", default=None, help="Write d(total)/d(pred) as RAWF32")
    p.add_argument("--mask-grad-out", default=None, help="Write d(total)/d(mask) as RAWF32")
    p.set_defaults(handler=cmd_loss)

    _, registry = create_loss_registry()
    p = commands.add_parser("gradcheck", help="Finite-difference check of analytic loss gradients")
    p.add_argument("loss", choices=sorted(registry) + ["all"])
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default=None)
    p.set_defaults(handler=cmd_gradcheck)

    geometry = commands.add_parser("geometry", help="Spherical geometry utilities")
    geo = geometry.add_subparsers(dest="geometry_command", required=True)

    g = geo.add_parser("distortion-map", help="cos(latitude) area weights, mean 1")
    g.add_argument("--width", type=int, required=True)
    g.add_argument("--height", type=int, required=True)
    g.add_argument("--out", default=None, help="RAWF32 output")
    g.set_defaults(handler=cmd_distortion_map)

    g = geo.add_parser("pointcloud", help="Back-project a depth map to an ASCII PLY")
    g.add_argument("input")
    g.add_argument("out")
    g.set_defaults(handler=cmd_pointcloud)

    g = geo.add_parser("normals", help="Surface normals as 3-channel RAWF32")
    g.add_argument("input")
    g.add_argument("out")
    g.set_defaults(handler=cmd_normals)

    g = geo.add_parser("rangemask", help="Ground-truth range mask at a distance threshold")
    g.add_argument("input")
    g.add_argument("out", help="8-bit PNG mask")
    g.add_argument("--threshold", type=float, required=True, help="Meters (presets 10, 20, 50, 100)")
    g.add_argument("--masked-out", default=None, help="Also write the masked depth map")
    g.set_defaults(handler=cmd_rangemask)

    reproject = commands.add_parser("reproject", help="ERP to perspective resampling")
    rep = reproject.add_subparsers(dest="reproject_command", required=True)
    r = rep.add_parser("ico", help="12 icosahedron patches plus rig.json")
    r.add_argument("input")
    r.add_argument("out_dir")
    r.add_argument("--fov", type=float, default=DEFAULT_FOV_DEG)
    r.add_argument("--size", type=int, default=DEFAULT_PATCH_SIZE)
    r.add_argument("--allow-gaps", action="store_true", help="Permit a fov that leaves the sphere uncovered")
    r.add_argument("--format", choices=["pfm", "png16", "rawf32"], default="pfm")
    r.set_defaults(handler=cmd_reproject_ico)

    p = commands.add_parser("curate", help="Run the pseudo-label curation pipeline")
    p.add_argument("config", help="Pipeline TOML")
    p.add_argument("--force", action="store_true", help="Re-execute every stage")
    p.set_defaults(handler=cmd_curate)

    p = commands.add_parser("reference", help="Render this CLI as Markdown")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_reference)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    try:
        settings = RuntimeSettings.resolve(args.seed, args.threads)
        payload, code = args.handler(args, settings)
    except PanoDepthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    if payload is not None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
