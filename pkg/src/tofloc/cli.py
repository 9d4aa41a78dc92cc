"""Command-line entry point: ``tofloc <command> ...``.

Settings resolve as built-in defaults, then ``--config FILE``, then flags.
Results go to stdout (or the named files) as JSON/CSV/PGM; the per-stage
JSON-lines log goes to stderr so that result files stay byte-reproducible.
"""

import argparse
import json
import os
import sys

from . import __version__, _accel
from . import calibration as calib
from . import localization as loc
from . import segmentation as seg
from . import synth
from .config import SCHEMA_VERSION, PipelineConfig
from .errors import ToflocError
from .frame_io import (FLOOR_MASK_FILE, OBJECT_MASK_FILE, MaskClass, frame_file, has_ground_truth, load_frame,
                       load_ground_truth, load_mask, save_frame, save_mask, write_pgm)
from .metrics import normal_angle_error
from .pipeline import (default_jobs, dumps, evaluate_batch, json_lines_logger, map_frames, read_manifest,
                       run_pipeline, write_batch)
from .pointcloud import backproject

_D = PipelineConfig()


def _dump(obj, path=None):
    text = dumps(obj)
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _parse_shapes(text):
    try:
        shapes = [tuple(float(v) for v in item.lower().split("x")) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad shape list {text!r}") from exc
    if not shapes or any(len(s) != 2 for s in shapes):
        raise argparse.ArgumentTypeError("shapes look like 0.9x2.0,1.0x2.0")
    return [list(s) for s in shapes]


def _load_config(args, overrides):
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.with_overrides(overrides)


def _ransac_flags(p):
    r = _D.ransac
    p.add_argument("--ransac-iters", type=int,
                   help=f"RANSAC hypotheses (default {r.iterations}; ample for a floor holding >= 30%% of points)")
    p.add_argument("--inlier-thresh", type=float,
                   help=f"inlier distance in m (default {r.inlier_threshold}; several times the ToF noise)")
    p.add_argument("--seed", type=int, help=f"RANSAC seed (default {r.seed})")


def _ransac_overrides(args):
    return {"ransac.iterations": args.ransac_iters, "ransac.inlier_threshold": args.inlier_thresh,
            "ransac.seed": args.seed}


def _localize_flags(p):
    p.add_argument("--cell", type=float, help=f"raster cell edge in m (default {_D.raster.cell_size})")
    p.add_argument("--threshold", type=float,
                   help=f"accept when confidence >= this (default {_D.gate.threshold}; scan it with `evaluate`)")
    p.add_argument("--shapes", type=_parse_shapes,
                   help="candidate footprints WxL in m, comma separated (default "
                        + ",".join(f"{w}x{l}" for w, l in _D.shapes) + "; common hospital bed sizes)")
    p.add_argument("--coverage", choices=loc.COVERAGE_RULES,
                   help=f"which cells a rectangle covers (default {_D.raster.coverage}; matches how cells get occupied)")


def _localize_overrides(args):
    return {"raster.cell_size": args.cell, "gate.threshold": args.threshold, "shapes": args.shapes,
            "raster.coverage": args.coverage}


def _calibration_for(args, frame_path, cloud, config):
    """Calibration from --calib, else --floor-mask, else the container's floor mask."""
    if getattr(args, "calib", None):
        with open(args.calib, encoding="utf-8") as fh:
            return calib.Calibration.from_dict(json.load(fh), cloud.shape)
    mask_path = getattr(args, "floor_mask", None) or frame_file(frame_path, FLOOR_MASK_FILE)
    if not os.path.exists(mask_path):
        raise ToflocError("no calibration: pass --calib or --floor-mask (the frame has no floor_mask.pgm)")
    return calib.calibrate(cloud, load_mask(mask_path, MaskClass.FLOOR, cloud.shape), config.ransac)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    if bool(args.spec) == bool(args.random):
        raise ToflocError("give either a scene spec file or --random")
    if args.spec:
        specs = [("", synth.SceneSpec.load(args.spec))]
    else:
        make = synth.random_bed_scene if args.random == "bed" else synth.random_floor_scene
        specs = [(f"{args.random}_{s:04d}", make(s, noise_sigma=args.noise))
                 for s in range(args.seed, args.seed + args.count)]
    written = []
    for name, spec in specs:
        out = os.path.join(args.output, name) if name else args.output
        r = synth.render_scene(spec)
        gt = r.ground_truth
        if args.occlude:
            gt.object_mask = synth.occlude_mask(gt.object_mask, args.occlude)
        save_frame(r.frame, out, gt, extra_meta={"scene": spec.to_dict()})
        written.append(out)
    if args.random:
        with open(os.path.join(args.output, "manifest.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(os.path.basename(p) + "\n" for p in written))
    _dump({"frames": [os.path.basename(p) or p for p in written]})
    return 0


def cmd_calibrate(args):
    config = _load_config(args, _ransac_overrides(args))
    frame = load_frame(args.frame)
    cloud = backproject(frame)
    mask = load_mask(args.floor_mask, MaskClass.FLOOR, cloud.shape) if args.floor_mask else None
    cal = calib.calibrate(cloud, mask, config.ransac)
    angle = None
    if has_ground_truth(args.frame):
        angle = normal_angle_error(cal.plane.normal, load_ground_truth(args.frame).plane_normal)
    _dump(cal.to_dict(angle), args.output)
    return 0


def cmd_segment(args):
    config = _load_config(args, {**_ransac_overrides(args), "object.h_min": args.h_min, "object.h_max": args.h_max,
                                 "object.min_component_px": args.min_component})
    mode = seg.SegMode.parse(args.mode)
    frame = load_frame(args.frame)
    cloud = backproject(frame)
    height_map = None
    if mode == seg.SegMode.OBJECT_HEIGHTBAND:
        height_map = calib.compute_height_map(cloud, _calibration_for(args, args.frame, cloud, config).transform)
    tag = MaskClass.FLOOR if mode == seg.SegMode.FLOOR_RANSAC else MaskClass(args.class_tag)
    cfg = seg.SegmenterConfig(mode, args.mask, tag, config.object.h_min, config.object.h_max,
                              config.object.min_component_px, config.ransac)
    mask = seg.segment(frame, cloud, height_map, cfg)
    save_mask(mask, args.output)
    _dump({"output": args.output, "class": mask.class_tag.value, "pixels": mask.count})
    return 0


def cmd_localize(args):
    config = _load_config(args, {**_ransac_overrides(args), **_localize_overrides(args)})
    frame = load_frame(args.frame)
    cloud = backproject(frame)
    cal = _calibration_for(args, args.frame, cloud, config)
    mask_path = args.object_mask or frame_file(args.frame, OBJECT_MASK_FILE)
    obj = load_mask(mask_path, MaskClass.OBJECT, cloud.shape)
    grid = None
    if obj.count == 0:
        result = loc.no_detection("empty object mask")
    else:
        pts = loc.project_to_ground(cloud, obj, cal.transform)
        result, grid = loc.localize(pts, config.shape_tuples, config.raster.cell_size,
                                    config.raster.min_points_per_cell, config.search, config.gate.threshold,
                                    config.raster.coverage)
    if args.debug and grid is not None:
        os.makedirs(args.debug, exist_ok=True)
        write_pgm(os.path.join(args.debug, "raster.pgm"),
                  loc.debug_image(grid, result.rect, config.raster.coverage)[::-1], 255)
    _dump(result.to_dict(), args.output)
    return 0


def _pipeline_one(item):
    frame_id, path, cfg = item
    try:
        out = run_pipeline(path, PipelineConfig.from_dict(cfg), frame_id=frame_id)
    except ToflocError as exc:
        return frame_id, {"frame_id": frame_id, "error": str(exc)}, []
    return frame_id, _pipeline_json(out), out.stages


def _pipeline_json(out):
    d = {"frame_id": out.frame_id, "result": out.result.to_dict(), "calibration": out.calibration.to_dict(
        None if out.record is None else out.record.angle_error_deg)}
    if out.record is not None:
        d["record"] = out.record.to_dict()
    return d


def cmd_pipeline(args):
    overrides = {**_ransac_overrides(args), **_localize_overrides(args)}
    if args.floor_mode:
        overrides["floor.mode"] = args.floor_mode
    if args.object_mode:
        overrides["object.mode"] = args.object_mode
    config = _load_config(args, overrides)
    log = None if args.no_log else json_lines_logger(sys.stderr)
    if args.batch:
        items = [(fid, p, config.to_dict()) for fid, p in read_manifest(args.batch)]
        results = sorted(map_frames(_pipeline_one, items, args.jobs or default_jobs()), key=lambda r: r[0])
        lines = []
        for _, d, stages in results:
            for rec in stages:
                if log:
                    log(rec)
            lines.append(dumps(d, indent=None))
        text = "".join(lines)
        if args.output:
            with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 1 if any("error" in d for _, d, _ in results) else 0
    if not args.frame:
        raise ToflocError("give a frame or --batch MANIFEST")
    out = run_pipeline(args.frame, config, debug_dir=args.debug, log=log)
    _dump(_pipeline_json(out), args.output)
    return 0


def cmd_evaluate(args):
    overrides = {**_localize_overrides(args), "eval.iou_threshold": args.iou_threshold}
    config = _load_config(args, overrides)
    log = None if args.no_log else json_lines_logger(sys.stderr)
    batch = evaluate_batch(args.manifest, config, args.jobs or default_jobs(), log)
    write_batch(batch, args.output, args.roc_out)
    _dump(batch.summary)
    return 0


def cmd_config(args):
    config = _load_config(args, {})
    sys.stdout.write(config.to_json())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="tofloc", description="Ground-calibrated object localization for ToF frames.")
    p.add_argument("--version", action="version",
                   version=f"tofloc {__version__} (config schema {SCHEMA_VERSION})")
    p.add_argument("--backend", choices=("numba", "numpy"),
                   help="kernel implementation (default: numba when installed, unless TOFLOC_DISABLE_NUMBA is set)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="pipeline config JSON (flags override it)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "render a synthetic frame container with ground truth")
    sp.add_argument("spec", nargs="?", help="scene spec JSON mirroring SceneSpec")
    sp.add_argument("-o", "--output", required=True, help="output frame directory (or batch directory)")
    sp.add_argument("--random", choices=("bed", "floor"), help="generate random scenes instead of reading a spec")
    sp.add_argument("--seed", type=int, default=0, help="first random seed (default 0)")
    sp.add_argument("--count", type=int, default=1, help="number of random scenes (default 1)")
    sp.add_argument("--noise", type=float, default=0.005, help="depth noise sigma in m (default 0.005)")
    sp.add_argument("--occlude", type=float, default=0.0,
                    help="drop this fraction of the object mask, leftmost pixels first (default 0)")

    sp = add("calibrate", cmd_calibrate, "fit the floor plane and the camera-to-ground transform")
    sp.add_argument("frame")
    sp.add_argument("--floor-mask", help="restrict the fit to this mask (default: all valid pixels)")
    sp.add_argument("-o", "--output", help="write JSON here instead of stdout")
    _ransac_flags(sp)

    sp = add("segment", cmd_segment, "produce a floor or object mask PGM")
    sp.add_argument("frame")
    sp.add_argument("--mode", required=True, choices=("external", "floor-ransac", "heightband"))
    sp.add_argument("--mask", help="mask file for --mode external")
    sp.add_argument("--class-tag", choices=("floor", "object"), default="object",
                    help="class of an external mask (default object)")
    sp.add_argument("--h-min", type=float, help=f"height band low end in m (default {_D.object.h_min})")
    sp.add_argument("--h-max", type=float, help=f"height band high end in m (default {_D.object.h_max})")
    sp.add_argument("--min-component", type=int,
                    help=f"smallest kept component in px (default {_D.object.min_component_px}; drops speckle)")
    sp.add_argument("--calib", help="calibration JSON from `tofloc calibrate`")
    sp.add_argument("--floor-mask", help="calibrate from this floor mask")
    sp.add_argument("-o", "--output", required=True, help="mask PGM to write")
    _ransac_flags(sp)

    sp = add("localize", cmd_localize, "fit a bed rectangle to the object footprint")
    sp.add_argument("frame")
    sp.add_argument("--object-mask", help="object mask (default: the container's object_mask.pgm)")
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--calib", help="calibration JSON from `tofloc calibrate`")
    grp.add_argument("--floor-mask", help="calibrate from this floor mask (default: the container's)")
    sp.add_argument("--debug", help="directory for the raster grid PGM")
    sp.add_argument("-o", "--output", help="write JSON here instead of stdout")
    _localize_flags(sp)
    _ransac_flags(sp)

    sp = add("pipeline", cmd_pipeline, "run every stage on one frame, or on a manifest with --batch")
    sp.add_argument("frame", nargs="?")
    sp.add_argument("--batch", help="manifest of frames; writes JSON lines")
    sp.add_argument("--jobs", type=int, help="worker processes for --batch (default: logical cores)")
    sp.add_argument("--floor-mode", choices=("external_file", "floor_ransac"),
                    help=f"floor source (default {_D.floor.mode})")
    sp.add_argument("--object-mode", choices=("external_file", "object_heightband"),
                    help=f"object source (default {_D.object.mode})")
    sp.add_argument("--debug", help="directory for intermediate maps and masks")
    sp.add_argument("--no-log", action="store_true", help="suppress the stage log on stderr")
    sp.add_argument("-o", "--output", help="write JSON here instead of stdout")
    _localize_flags(sp)
    _ransac_flags(sp)

    sp = add("evaluate", cmd_evaluate, "run a manifest and write records.csv, summary.csv, errors.csv")
    sp.add_argument("manifest")
    sp.add_argument("-o", "--output", required=True, help="output directory")
    sp.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    sp.add_argument("--roc-out", help="CSV of (threshold, fpr, tpr) points of the confidence sweep")
    sp.add_argument("--iou-threshold", type=float,
                    help=f"box IoU counted as correct (default {_D.eval.iou_threshold})")
    sp.add_argument("--no-log", action="store_true", help="suppress the stage log on stderr")
    _localize_flags(sp)

    add("config", cmd_config, "print the effective configuration as JSON")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.backend:
        _accel.set_backend(args.backend)
        # worker processes pick the backend up from the environment
        os.environ["TOFLOC_DISABLE_NUMBA"] = "1" if args.backend == "numpy" else "0"
    try:
        return args.func(args)
    except (ToflocError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"tofloc {args.command}: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
