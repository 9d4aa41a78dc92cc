"""On-disk formats for frames, masks and ground truth.

A frame lives in a directory (or under a flat filename prefix) holding

``depth.pgm``
    16-bit big-endian binary PGM, depth along the optical axis in
    millimeters; 0 marks an invalid pixel.
``intensity.pgm``
    16-bit binary PGM with raw sensor counts.
``meta.json``
    Intrinsics (``fx, fy, cx, cy, width, height``) and optional ground
    truth (``gt_plane_normal``, ``gt_plane_offset``, ``gt_bed``).
``floor_mask.pgm``, ``object_mask.pgm``
    Optional 8-bit masks with values {0, 255}.

Depth is stored as integer millimeters so save/load round-trips exactly.
Depths beyond 20 m are treated as invalid on load.
"""

import enum
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .rect import RectModel

MAX_DEPTH_M = 20.0
DEPTH_FILE = "depth.pgm"
INTENSITY_FILE = "intensity.pgm"
META_FILE = "meta.json"
FLOOR_MASK_FILE = "floor_mask.pgm"
OBJECT_MASK_FILE = "object_mask.pgm"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) != self.width or int(self.height) != self.height or self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive integers")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self):
        return (int(self.height), int(self.width))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed intrinsics: {exc}") from exc

    @classmethod
    def from_fov(cls, width, height, hfov_deg):
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


@dataclass
class ToFFrame:
    """One sensor frame. Arrays are indexed ``[row, col]`` with shape (height, width)."""

    intensity: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        shape = self.intrinsics.shape
        for name in ("intensity", "depth", "valid"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        d = self.depth[self.valid]
        if not (np.all(np.isfinite(d)) and np.all(d > 0) and np.all(d <= MAX_DEPTH_M)):
            raise ValueError("valid depths must be finite and in (0, 20] m")
        if np.any(self.intensity < 0):
            raise ValueError("intensity must be non-negative")

    @property
    def shape(self):
        return self.intrinsics.shape

    @classmethod
    def from_depth(cls, depth, intrinsics, intensity=None):
        """Build a frame, marking non-finite, non-positive or too-far depths invalid."""
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(depth) & (depth > 0) & (depth <= MAX_DEPTH_M)
        if intensity is None:
            intensity = np.zeros_like(depth)
        return cls(np.asarray(intensity, dtype=np.float64), np.where(valid, depth, 0.0), valid, intrinsics)


class MaskClass(str, enum.Enum):
    FLOOR = "floor"
    OBJECT = "object"


@dataclass
class SegMask:
    label: np.ndarray
    class_tag: MaskClass = MaskClass.OBJECT

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=bool)
        self.class_tag = MaskClass(self.class_tag)

    @property
    def shape(self):
        return self.label.shape

    @property
    def count(self):
        return int(np.count_nonzero(self.label))

    def __eq__(self, other):
        return (isinstance(other, SegMask) and self.class_tag == other.class_tag
                and self.label.shape == other.label.shape and bool(np.array_equal(self.label, other.label)))


@dataclass
class GroundTruth:
    """Annotated calibration and object pose.

    The plane uses the camera-positive convention ``normal . p + offset = 0``
    with ``offset > 0`` equal to the camera height. ``bed_rect`` is expressed
    in the ground frame that :func:`tofloc.calibration.build_ground_transform`
    derives from this plane.
    """

    plane_normal: np.ndarray
    plane_offset: float
    bed_rect: Optional[RectModel]
    floor_mask: Optional[SegMask] = None
    object_mask: Optional[SegMask] = None

    @property
    def camera_height(self):
        return self.plane_offset


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def _pgm_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary (P5) PGM; returns a uint8 or uint16 array."""
    buf = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad PGM header")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    data = buf[offset:offset + nbytes]
    if len(data) != nbytes:
        raise FormatError(f"{path}: truncated PGM data")
    arr = np.frombuffer(data, dtype=dtype).reshape(height, width)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval")
    return arr.astype(np.uint16 if dtype.itemsize == 2 else np.uint8)


def write_pgm(path, arr, maxval=None):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    if maxval is None:
        maxval = 255 if arr.dtype == np.uint8 else 65535
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise ValueError("sample out of range")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + arr.astype(dtype).tobytes())


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def frame_file(path, name):
    """Path of a container member; ``path`` is a directory or a filename prefix."""
    path = os.fspath(path)
    if os.path.isdir(path):
        return os.path.join(path, name)
    return path + name


def _read_meta(path):
    try:
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return meta


def load_frame(path):
    depth_mm = read_pgm(frame_file(path, DEPTH_FILE))
    intensity = read_pgm(frame_file(path, INTENSITY_FILE))
    intr = Intrinsics.from_dict(_read_meta(frame_file(path, META_FILE)))
    if depth_mm.shape != intensity.shape:
        raise FormatError(f"depth {depth_mm.shape} and intensity {intensity.shape} differ in size")
    if depth_mm.shape != intr.shape:
        raise FormatError(f"image size {depth_mm.shape} disagrees with intrinsics {intr.shape}")
    depth = depth_mm.astype(np.float64) / 1000.0
    valid = (depth_mm > 0) & (depth <= MAX_DEPTH_M)
    return ToFFrame(intensity.astype(np.float64), np.where(valid, depth, 0.0), valid, intr)


def depth_to_mm(frame):
    mm = np.rint(np.where(frame.valid, frame.depth, 0.0) * 1000.0)
    return np.clip(mm, 0, 65535).astype(np.uint16)


def save_frame(frame, path, ground_truth=None, extra_meta=None, prefix=False):
    """Write ``frame`` (and optional ground truth) to a directory, or under a
    filename prefix when ``prefix`` is true."""
    path = os.fspath(path)
    if not prefix:
        os.makedirs(path, exist_ok=True)
    write_pgm(frame_file(path, DEPTH_FILE), depth_to_mm(frame), 65535)
    counts = np.clip(np.rint(frame.intensity), 0, 65535).astype(np.uint16)
    write_pgm(frame_file(path, INTENSITY_FILE), counts, 65535)
    meta = frame.intrinsics.to_dict()
    if ground_truth is not None:
        meta.update(ground_truth_to_dict(ground_truth))
        if ground_truth.floor_mask is not None:
            save_mask(ground_truth.floor_mask, frame_file(path, FLOOR_MASK_FILE))
        if ground_truth.object_mask is not None:
            save_mask(ground_truth.object_mask, frame_file(path, OBJECT_MASK_FILE))
    if extra_meta:
        meta.update(extra_meta)
    with open(frame_file(path, META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def load_mask(path, class_tag=MaskClass.OBJECT, shape=None):
    raw = read_pgm(path)
    if raw.dtype != np.uint8:
        raise FormatError(f"{path}: masks must be 8-bit")
    if shape is not None and raw.shape != tuple(shape):
        raise FormatError(f"{path}: mask size {raw.shape} does not match frame {tuple(shape)}")
    if not np.all((raw == 0) | (raw == 255)):
        raise FormatError(f"{path}: mask values must be 0 or 255")
    return SegMask(raw == 255, class_tag)


def save_mask(mask, path):
    write_pgm(path, np.where(mask.label, 255, 0).astype(np.uint8), 255)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def _normalize_plane(normal, offset):
    n = np.asarray(normal, dtype=np.float64).reshape(-1)
    if n.shape != (3,) or not np.all(np.isfinite(n)) or not math.isfinite(offset):
        raise FormatError("gt_plane_normal must be three finite numbers")
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > 1e-2:
        raise FormatError(f"gt_plane_normal has norm {norm:.6g}, not unit")
    n, offset = n / norm, offset / norm
    if offset < 0:
        n, offset = -n, -offset
    return n, float(offset)


def ground_truth_from_dict(meta, floor_mask=None, object_mask=None):
    # gt_bed must be present; an explicit null marks a scene without a bed
    missing = [k for k in ("gt_plane_normal", "gt_plane_offset", "gt_bed") if k not in meta]
    if missing:
        raise FormatError(f"ground truth is missing {', '.join(missing)}")
    n, d = _normalize_plane(meta["gt_plane_normal"], float(meta["gt_plane_offset"]))
    bed = meta["gt_bed"]
    rect = None
    if bed is not None:
        try:
            rect = RectModel.from_dict(bed)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed gt_bed: {exc}") from exc
    return GroundTruth(n, d, rect, floor_mask, object_mask)


def ground_truth_to_dict(gt):
    return {
        "gt_plane_normal": [float(v) for v in gt.plane_normal],
        "gt_plane_offset": float(gt.plane_offset),
        "gt_bed": None if gt.bed_rect is None else gt.bed_rect.to_dict(),
    }


def has_ground_truth(path):
    return "gt_plane_normal" in _read_meta(frame_file(path, META_FILE))


def load_ground_truth(path):
    """Ground truth from a frame container, or from a sidecar ``.json`` path.

    Masks next to the sidecar are attached when present.
    """
    path = os.fspath(path)
    if path.endswith(".json"):
        meta_path = path
        container = os.path.dirname(path) or "."
    else:
        meta_path = frame_file(path, META_FILE)
        container = path
    meta = _read_meta(meta_path)
    shape = None
    if all(k in meta for k in ("width", "height")):
        shape = (int(meta["height"]), int(meta["width"]))
    masks = {}
    for tag, name in ((MaskClass.FLOOR, FLOOR_MASK_FILE), (MaskClass.OBJECT, OBJECT_MASK_FILE)):
        mpath = frame_file(container, name)
        masks[tag] = load_mask(mpath, tag, shape) if os.path.exists(mpath) else None
    return ground_truth_from_dict(meta, masks[MaskClass.FLOOR], masks[MaskClass.OBJECT])
