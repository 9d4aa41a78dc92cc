import numpy as np
import pytest

from tofloc import _accel
from tofloc.frame_io import save_frame
from tofloc.synth import render_scene, random_bed_scene

BACKENDS = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    with _accel.using_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bed_scene():
    spec = random_bed_scene(0)
    return spec, render_scene(spec)


@pytest.fixture
def frame_dir(tmp_path, bed_scene):
    _, r = bed_scene
    path = tmp_path / "frame"
    save_frame(r.frame, path, r.ground_truth)
    return path


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records one pass/fail line for the summary."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        request.config.stash.setdefault(_ACCEPTANCE, []).append((number, line))
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
