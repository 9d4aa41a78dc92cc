import json
import os
import subprocess
import sys

import pytest

from tofloc import __version__
from tofloc.cli import main
from tofloc.config import SCHEMA_VERSION
from tofloc.frame_io import load_frame, load_mask


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def frame(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--random", "bed", "--seed", 3, "-o", tmp_path / "set")
    assert code == 0 and json.loads(out) == {"frames": ["bed_0003"]}
    return tmp_path / "set" / "bed_0003"


def test_version():
    out = subprocess.run([sys.executable, "-m", "tofloc.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip() == f"tofloc {__version__} (config schema {SCHEMA_VERSION})"


def test_synth_from_spec(tmp_path, capsys):
    spec = {"bed": {"cx": 0.5, "theta_deg": 20}, "camera": {"x": -2.0, "z": 2.4, "pitch_deg": 50}}
    (tmp_path / "s.json").write_text(json.dumps(spec))
    code, _, _ = run(capsys, "synth", tmp_path / "s.json", "-o", tmp_path / "f")
    assert code == 0
    assert load_frame(tmp_path / "f").valid.any()
    meta = json.loads((tmp_path / "f" / "meta.json").read_text())
    assert meta["scene"]["bed"]["cx"] == 0.5


def test_synth_needs_exactly_one_source(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "-o", tmp_path / "x")
    assert code == 1 and "error" in err


def test_calibrate(frame, capsys, tmp_path):
    code, out, _ = run(capsys, "calibrate", frame, "--floor-mask", frame / "floor_mask.pgm")
    d = json.loads(out)
    assert code == 0 and d["angle_error_deg"] < 0.5 and d["offset"] > 1.5
    code, _, _ = run(capsys, "calibrate", frame, "--seed", 1, "-o", tmp_path / "cal.json")
    assert json.loads((tmp_path / "cal.json").read_text())["inlier_fraction"] > 0.3


def test_segment_heightband_and_localize(frame, capsys, tmp_path):
    code, out, _ = run(capsys, "calibrate", frame, "--floor-mask", frame / "floor_mask.pgm",
                       "-o", tmp_path / "cal.json")
    code, out, _ = run(capsys, "segment", frame, "--mode", "heightband", "--calib", tmp_path / "cal.json",
                       "-o", tmp_path / "obj.pgm")
    assert code == 0 and json.loads(out)["pixels"] == load_mask(tmp_path / "obj.pgm").count > 0
    code, out, _ = run(capsys, "localize", frame, "--object-mask", tmp_path / "obj.pgm", "--calib",
                       tmp_path / "cal.json", "--debug", tmp_path / "dbg")
    res = json.loads(out)
    assert code == 0 and res["accepted"] and os.path.exists(tmp_path / "dbg" / "raster.pgm")


def test_segment_errors(frame, capsys, tmp_path):
    code, _, err = run(capsys, "segment", frame, "--mode", "external", "-o", tmp_path / "m.pgm")
    assert code == 1 and "mask path" in err
    with pytest.raises(SystemExit) as exc:
        main(["segment", str(frame), "--mode", "cnn", "-o", str(tmp_path / "m.pgm")])
    assert exc.value.code == 2


def test_localize_flags(frame, capsys):
    code, out, _ = run(capsys, "localize", frame, "--shapes", "0.9x2.0", "--threshold", "0.99",
                       "--coverage", "center")
    res = json.loads(out)
    assert code == 0 and res["width"] == 0.9 and res["length"] == 2.0
    assert res["accepted"] == (res["confidence"] >= 0.99)


def test_pipeline_single_and_batch(frame, capsys, tmp_path):
    code, out, err = run(capsys, "pipeline", frame)
    d = json.loads(out)
    assert code == 0 and d["result"]["accepted"] and d["record"]["box_iou"] > 0.9
    stages = [json.loads(line)["stage"] for line in err.splitlines()]
    assert stages[0] == "load" and stages[-1] == "evaluation"
    code, out, err = run(capsys, "pipeline", "--batch", frame.parent / "manifest.txt", "--no-log", "--jobs", 1)
    lines = out.splitlines()
    assert code == 0 and len(lines) == 1 and err == ""
    assert json.loads(lines[0])["frame_id"] == "bed_0003"


def test_pipeline_missing_mask_exits_1(frame, capsys):
    os.remove(frame / "object_mask.pgm")
    code, _, err = run(capsys, "pipeline", frame, "--no-log")
    assert code == 1 and "object_segmentation" in err


def test_evaluate_writes_csvs(tmp_path, capsys):
    run(capsys, "synth", "--random", "bed", "--count", 2, "-o", tmp_path / "set")
    code, out, _ = run(capsys, "evaluate", tmp_path / "set" / "manifest.txt", "-o", tmp_path / "ev",
                       "--jobs", 1, "--no-log", "--roc-out", tmp_path / "roc.csv")
    summary = json.loads(out)
    assert code == 0 and summary["n_records"] == 2 and summary["ap"] == 1.0
    assert summary["roc_auc"] is None and summary["auc_degenerate"] is True
    rows = (tmp_path / "ev" / "records.csv").read_text().splitlines()
    assert rows[0].startswith("frame_id,seg_iou") and len(rows) == 3
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr\ninf,0.0,0.0\n")


def test_config_command(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"gate": {"threshold": 0.6}}')
    code, out, _ = run(capsys, "config", "--config", tmp_path / "c.json")
    assert code == 0 and json.loads(out)["gate"]["threshold"] == 0.6
    (tmp_path / "bad.json").write_text('{"gate": {"thresh": 0.6}}')
    code, _, err = run(capsys, "config", "--config", tmp_path / "bad.json")
    assert code == 1 and "unknown keys" in err


def test_flags_override_config(frame, tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"gate": {"threshold": 0.99}}')
    _, out, _ = run(capsys, "localize", frame, "--config", tmp_path / "c.json")
    assert json.loads(out)["accepted"] is False
    _, out, _ = run(capsys, "localize", frame, "--config", tmp_path / "c.json", "--threshold", 0.1)
    assert json.loads(out)["accepted"] is True
