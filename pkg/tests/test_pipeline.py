import io
import json
import os

import numpy as np
import pytest
from scipy import ndimage

from tofloc.config import PipelineConfig
from tofloc.errors import PipelineError
from tofloc.frame_io import SegMask, load_mask, read_pgm, save_frame
from tofloc.pipeline import (dumps, evaluate_batch, json_lines_logger, read_manifest, run_pipeline,
                             write_batch)
from tofloc.synth import CameraPose, Room, SceneSpec, occlude_mask, random_bed_scene, render_scene

INJECTED = (2, 5, 7)


def _write_scene(path, seed, noise=0.0, object_mask=None):
    r = render_scene(random_bed_scene(seed, noise_sigma=noise))
    gt = r.ground_truth
    if object_mask is not None:
        gt.object_mask = object_mask(gt.object_mask)
    save_frame(r.frame, path, gt)
    return r


@pytest.fixture(scope="module")
def batch_dir(tmp_path_factory):
    """Ten noiseless frames; frames in INJECTED have 60% of their object mask cut away."""
    d = tmp_path_factory.mktemp("batch")
    for s in range(10):
        cut = (lambda m: occlude_mask(m, 0.6)) if s in INJECTED else None
        _write_scene(d / f"f{s}", s, object_mask=cut)
    clean = d / "clean.txt"
    clean.write_text("".join(f"f{s}\n" for s in range(10) if s not in INJECTED))
    (d / "all.txt").write_text("# ten frames\n" + "".join(f"f{s}\n" for s in range(10)))
    return d


def test_closed_loop_frame(frame_dir):
    out = run_pipeline(frame_dir)
    assert out.result.accepted
    assert out.record.box_iou >= 0.95
    assert out.record.angle_error_deg < 0.5
    assert out.record.seg_iou == 1.0
    assert [s["stage"] for s in out.stages] == ["load", "floor_segmentation", "calibration", "height_normals",
                                                "object_segmentation", "localization", "gating", "evaluation"]


@pytest.mark.parametrize("seed", range(4))
def test_eroded_mask_is_rejected(tmp_path, seed):
    def erode(mask):
        m = mask.label.copy()
        while m.sum() > 0.4 * mask.count:
            m = ndimage.binary_erosion(m)
        return SegMask(m, mask.class_tag)

    _write_scene(tmp_path / "f", seed, object_mask=erode)
    out = run_pipeline(tmp_path / "f")
    assert out.result.detected and not out.result.accepted


def test_missing_floor_mask_names_stage(frame_dir):
    os.remove(frame_dir / "floor_mask.pgm")
    lines = io.StringIO()
    with pytest.raises(PipelineError) as exc:
        run_pipeline(frame_dir, log=json_lines_logger(lines))
    assert exc.value.stage == "floor_segmentation"
    logged = [json.loads(x) for x in lines.getvalue().splitlines()]
    assert logged[-1]["stage"] == "floor_segmentation" and logged[-1]["ok"] is False


def test_classical_modes(frame_dir):
    cfg = PipelineConfig().with_overrides({"object.mode": "object_heightband"})
    out = run_pipeline(frame_dir, cfg)
    assert out.result.accepted and out.record.box_iou >= 0.8


def test_debug_dump(frame_dir, tmp_path):
    dbg = tmp_path / "dbg"
    run_pipeline(frame_dir, debug_dir=dbg)
    names = sorted(os.listdir(dbg))
    for n in ("floor_mask.pgm", "object_mask.pgm", "height.pgm", "xyz_x.pgm", "hn_z.pgm", "raster.pgm",
              "calibration.json", "result.json"):
        assert n in names
    assert load_mask(dbg / "object_mask.pgm").count > 0
    img = read_pgm(dbg / "raster.pgm")
    assert set(np.unique(img)) <= {0, 85, 170, 255}
    res = json.loads((dbg / "result.json").read_text())
    assert res["accepted"] is True


def test_frame_without_bed(tmp_path):
    r = render_scene(SceneSpec(Room(walls=False), None, CameraPose(0, 0, 2.2, 60.0)))
    save_frame(r.frame, tmp_path / "f", r.ground_truth)
    out = run_pipeline(tmp_path / "f")
    assert not out.result.detected and out.record.box_iou == 0.0


def test_clean_batch(batch_dir):
    batch = evaluate_batch(str(batch_dir / "clean.txt"))
    assert not batch.errors
    ious = [r.box_iou for r in batch.records]
    assert np.mean(ious) >= 0.95
    assert batch.summary["ap"] == 1.0


def test_injected_undersegmentation(batch_dir):
    batch = evaluate_batch(str(batch_dir / "all.txt"))
    clearing = [r.frame_id for r in batch.records if r.box_iou >= 0.7]
    assert sorted(clearing) == [f"f{s}" for s in range(10) if s not in INJECTED]
    assert batch.summary["ap"] == pytest.approx(7 / 10)
    assert batch.summary["auc"] <= batch.summary["ap"]


def test_unreadable_frame_becomes_error_row(batch_dir, tmp_path):
    entries = read_manifest(str(batch_dir / "all.txt"))
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "depth.pgm").write_bytes(b"P2\n")
    entries[4] = ("f4", str(broken))
    batch = evaluate_batch(entries)
    assert len(batch.records) == 9 and len(batch.errors) == 1
    assert batch.errors[0]["frame_id"] == "f4" and batch.errors[0]["stage"] == "load"
    paths = write_batch(batch, tmp_path / "out")
    errors = (tmp_path / "out" / "errors.csv").read_text().splitlines()
    assert errors[0] == "frame_id,stage,message" and errors[1].startswith("f4,load,")
    assert len((tmp_path / "out" / "records.csv").read_text().splitlines()) == 10
    assert len(paths) == 3


def test_batch_outputs_are_byte_identical(batch_dir, tmp_path):
    a = evaluate_batch(str(batch_dir / "all.txt"), jobs=1)
    b = evaluate_batch(str(batch_dir / "all.txt"), jobs=2)
    write_batch(a, tmp_path / "a", tmp_path / "a_roc.csv")
    write_batch(b, tmp_path / "b", tmp_path / "b_roc.csv")
    for name in ("records.csv", "summary.csv", "errors.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a_roc.csv").read_bytes() == (tmp_path / "b_roc.csv").read_bytes()


def test_manifest_formats(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"frames": [{"id": "a", "path": "x/a"}, {"path": "/abs/b"}]}))
    assert read_manifest(str(tmp_path / "m.json")) == [("a", str(tmp_path / "x/a")), ("b", "/abs/b")]
    (tmp_path / "m.txt").write_text("a\n  \n# note\nsub/a\n")
    with pytest.raises(ValueError):
        read_manifest(str(tmp_path / "m.txt"))


def test_dumps_writes_null_for_nan():
    text = dumps({"x": float("nan"), "y": [1.0, float("inf")]})
    assert json.loads(text) == {"x": None, "y": [1.0, None]}
