"""End-to-end processing of frame containers and batch evaluation.

Stages, in order: load, floor_segmentation, calibration, height_normals,
object_segmentation, localization, gating and, when the frame carries
ground truth, evaluation. A failure is re-raised as
:class:`~tofloc.errors.PipelineError` naming the stage.
"""

import csv
import io
import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import calibration as calib
from . import localization as loc
from . import segmentation as seg
from .config import PipelineConfig
from .errors import PipelineError
from .frame_io import (FLOOR_MASK_FILE, OBJECT_MASK_FILE, MaskClass, frame_file, has_ground_truth,
                       load_frame, load_ground_truth, save_mask, write_pgm)
from .metrics import EvalRecord, auc_report, box_iou, normal_angle_error, pixel_iou, rect_to_frame
from .pointcloud import backproject, estimate_normals, export_map, export_normals, export_xyz

HEIGHT_EXPORT_SCALE = 1e-3


@dataclass
class PipelineOutput:
    frame_id: str
    result: loc.LocalizationResult
    calibration: calib.Calibration
    record: Optional[EvalRecord] = None
    stages: list = field(default_factory=list)


class _StageRunner:
    def __init__(self, frame_id, log):
        self.frame_id = frame_id
        self.log = log
        self.records = []

    def run(self, stage, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except PipelineError:
            raise
        except Exception as exc:
            self._emit(stage, t0, False, f"{type(exc).__name__}: {exc}")
            raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc
        self._emit(stage, t0, True, None)
        return out

    def _emit(self, stage, t0, ok, error):
        rec = {"frame": self.frame_id, "stage": stage, "ok": ok,
               "wall_s": round(time.perf_counter() - t0, 6)}
        if error:
            rec["error"] = error
        self.records.append(rec)
        if self.log is not None:
            self.log(rec)


def json_lines_logger(stream):
    """A stage logger writing one JSON object per line to ``stream``."""
    def log(rec):
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
        stream.flush()
    return log


def _mask_path(frame_path, configured, default_name):
    return configured or frame_file(frame_path, default_name)


def _floor_mask(frame_path, frame, cloud, config):
    if config.floor.mode == seg.SegMode.FLOOR_RANSAC.value:
        return seg.segment_floor_ransac(cloud, config.ransac)
    path = _mask_path(frame_path, config.floor.path, FLOOR_MASK_FILE)
    cfg = seg.SegmenterConfig(seg.SegMode.EXTERNAL_FILE, path, MaskClass.FLOOR)
    return seg.segment(frame, config=cfg)


def _object_mask(frame_path, frame, height_map, config):
    o = config.object
    if o.mode == seg.SegMode.OBJECT_HEIGHTBAND.value:
        return seg.segment_object_heightband(height_map, (o.h_min, o.h_max), o.min_component_px)
    path = _mask_path(frame_path, o.path, OBJECT_MASK_FILE)
    cfg = seg.SegmenterConfig(seg.SegMode.EXTERNAL_FILE, path, MaskClass.OBJECT)
    return seg.segment(frame, config=cfg)


def jsonable(obj):
    """``obj`` with non-finite floats replaced by None, so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj, indent=2):
    return json.dumps(jsonable(obj), indent=indent, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def evaluate_frame(frame_id, gt, calibration, object_mask, result, iou_threshold=0.7):
    """Metrics of one processed frame against its ground truth.

    Segmentation scores compare object masks (NaN without a GT mask). The
    predicted rectangle is mapped into the ground frame of the true plane
    before the box IoU is taken.
    """
    seg_scores = (math.nan,) * 3
    if gt.object_mask is not None:
        seg_scores = pixel_iou(gt.object_mask, object_mask)
    angle = normal_angle_error(calibration.plane.normal, gt.plane_normal)
    biou = 0.0
    if result.rect is not None and gt.bed_rect is not None:
        gt_transform = calib.build_ground_transform(calib.GroundPlane(gt.plane_normal, gt.plane_offset))
        biou = box_iou(rect_to_frame(result.rect, calibration.transform, gt_transform), gt.bed_rect)
    return EvalRecord(frame_id, *seg_scores, angle, biou, float(result.confidence), bool(result.accepted))


def run_pipeline(frame_path, config=None, debug_dir=None, log=None, frame_id=None):
    """Process one frame container end to end; see the module docstring."""
    config = config or PipelineConfig()
    frame_path = os.fspath(frame_path)
    frame_id = frame_id or os.path.basename(os.path.normpath(frame_path))
    st = _StageRunner(frame_id, log)
    if debug_dir:
        os.makedirs(debug_dir, exist_ok=True)

    def dbg(name):
        return os.path.join(debug_dir, name)

    def load():
        frame = load_frame(frame_path)
        gt = load_ground_truth(frame_path) if has_ground_truth(frame_path) else None
        return frame, gt, backproject(frame, source=frame_path)

    frame, gt, cloud = st.run("load", load)

    floor = st.run("floor_segmentation", _floor_mask, frame_path, frame, cloud, config)
    cal = st.run("calibration", calib.calibrate, cloud, floor, config.ransac)

    def height_normals():
        hm = calib.compute_height_map(cloud, cal.transform)
        normals = None
        if config.normals.enabled or debug_dir:
            n = config.normals
            normals = calib.transform_normals(estimate_normals(cloud, n.radius, n.k, n.min_neighbors), cal.transform)
        return hm, normals

    height_map, normals = st.run("height_normals", height_normals)
    obj = st.run("object_segmentation", _object_mask, frame_path, frame, height_map, config)

    def localize():
        if obj.count == 0:
            return loc.no_detection("empty object mask"), None
        pts = loc.project_to_ground(cloud, obj, cal.transform)
        return loc.localize(pts, config.shape_tuples, config.raster.cell_size, config.raster.min_points_per_cell,
                            config.search, None, config.raster.coverage)

    result, grid = st.run("localization", localize)
    result = st.run("gating", loc.gate, result, config.gate.threshold)

    record = None
    if gt is not None:
        record = st.run("evaluation", evaluate_frame, frame_id, gt, cal, obj, result, config.eval.iou_threshold)

    if debug_dir:
        save_mask(floor, dbg("floor_mask.pgm"))
        save_mask(obj, dbg("object_mask.pgm"))
        export_map(height_map.heights, dbg("height.pgm"), HEIGHT_EXPORT_SCALE)
        export_xyz(cloud, dbg("xyz_"))
        if normals is not None:
            export_normals(normals, dbg("hn_"))
        if grid is not None:
            write_pgm(dbg("raster.pgm"), loc.debug_image(grid, result.rect, config.raster.coverage)[::-1], 255)
        _write_json(dbg("calibration.json"), cal.to_dict(None if gt is None else record.angle_error_deg))
        _write_json(dbg("result.json"), result.to_dict())
    return PipelineOutput(frame_id, result, cal, record, st.records)


# ---------------------------------------------------------------------------
# Batch evaluation
# ---------------------------------------------------------------------------

def read_manifest(path):
    """``[(frame_id, frame_path)]`` from a manifest.

    Either JSON ``{"frames": [{"id": ..., "path": ...}, ...]}`` or plain
    text with one frame path per line (``#`` starts a comment, the id is
    the last path component). Relative paths resolve against the manifest's
    directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        entries = [(str(e.get("id") or os.path.basename(os.path.normpath(e["path"]))), e["path"])
                   for e in json.loads(text)["frames"]]
    else:
        entries = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                entries.append((os.path.basename(os.path.normpath(line)), line))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest has duplicate frame ids")
    return [(fid, p if os.path.isabs(p) else os.path.join(base, p)) for fid, p in entries]


def _eval_one(args):
    frame_id, frame_path, config_dict = args
    config = PipelineConfig.from_dict(config_dict)
    try:
        out = run_pipeline(frame_path, config, frame_id=frame_id)
    except PipelineError as exc:
        return frame_id, None, (exc.stage, exc.detail), []
    if out.record is None:
        return frame_id, None, ("evaluation", "frame has no ground truth"), out.stages
    return frame_id, out.record, None, out.stages


@dataclass
class BatchResult:
    records: list
    errors: list
    summary: dict
    roc: np.ndarray


def default_jobs():
    return max(1, os.cpu_count() or 1)


def map_frames(fn, items, jobs):
    """``fn`` over ``items`` on ``jobs`` worker processes, results in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(jobs, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))


def summarize(records, n_errors, iou_threshold):
    def mean(name):
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else math.nan

    out = {"n_frames": len(records) + n_errors, "n_records": len(records), "n_errors": n_errors,
           "iou_threshold": float(iou_threshold)}
    for name in ("seg_iou", "seg_precision", "seg_recall", "angle_error_deg", "box_iou", "confidence"):
        out[f"mean_{name}"] = mean(name)
    if records:
        rep = auc_report(records, iou_threshold)
        out.update(ap=rep.ap, auc=rep.auc, roc_auc=rep.roc_auc, auc_degenerate=rep.degenerate)
        return out, rep.curve
    out.update(ap=math.nan, auc=math.nan, roc_auc=math.nan, auc_degenerate=True)
    return out, np.zeros((0, 3))


def evaluate_batch(manifest, config=None, jobs=1, log=None):
    """Run every manifest frame and aggregate. Per-frame failures become error rows."""
    config = config or PipelineConfig()
    entries = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else list(manifest)
    cfg = config.to_dict()
    results = map_frames(_eval_one, [(fid, p, cfg) for fid, p in entries], jobs)
    records, errors = [], []
    for frame_id, record, error, stages in sorted(results, key=lambda r: r[0]):
        if log is not None:
            for rec in stages:
                log(rec)
        if record is not None:
            records.append(record)
        else:
            errors.append({"frame_id": frame_id, "stage": error[0], "message": error[1]})
    summary, curve = summarize(records, len(errors), config.eval.iou_threshold)
    return BatchResult(records, errors, summary, curve)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_batch(batch, out_dir, roc_out=None):
    """Write records.csv, summary.csv and errors.csv (and the ROC curve if asked)."""
    os.makedirs(out_dir, exist_ok=True)
    cols = EvalRecord.columns()
    files = {
        "records.csv": _csv_text(cols, [[getattr(r, c) for c in cols] for r in batch.records]),
        "summary.csv": _csv_text(list(batch.summary), [list(batch.summary.values())]),
        "errors.csv": _csv_text(["frame_id", "stage", "message"],
                                [[e["frame_id"], e["stage"], e["message"]] for e in batch.errors]),
    }
    paths = []
    for name, text in files.items():
        paths.append(os.path.join(out_dir, name))
        with open(paths[-1], "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    if roc_out:
        with open(roc_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(_csv_text(["threshold", "fpr", "tpr"], [[float(v) for v in row] for row in batch.roc]))
        paths.append(roc_out)
    return paths
