"""Synthetic ToF scenes with exact ground truth.

World frame: z up, floor at z = 0. A scene holds an optional rectangular
room of vertical walls, one box-shaped bed and a pinhole camera. Camera
``pitch_deg`` is the depression of the optical axis below the horizon
(90 = looking straight down), ``yaw_deg`` the heading of the optical axis
(counter-clockwise from +x) and ``roll_deg`` a rotation about it.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .calibration import GroundPlane, build_ground_transform
from .frame_io import GroundTruth, Intrinsics, MaskClass, SegMask, ToFFrame
from .localization import DEFAULT_SHAPES
from .rect import RectModel

HIT_NONE, HIT_FLOOR, HIT_WALL, HIT_BED = 0, 1, 2, 3
INTENSITY_SCALE = 65535.0


def default_intrinsics():
    return Intrinsics.from_fov(160, 120, 60.0)


@dataclass
class Room:
    x_min: float = -5.0
    x_max: float = 5.0
    y_min: float = -5.0
    y_max: float = 5.0
    walls: bool = True


@dataclass
class Bed:
    cx: float = 0.0
    cy: float = 0.0
    theta_deg: float = 0.0
    width_m: float = 0.9
    length_m: float = 2.0
    height_m: float = 0.55

    @property
    def rect(self):
        return RectModel(self.cx, self.cy, math.radians(self.theta_deg), self.width_m, self.length_m)


@dataclass
class CameraPose:
    x: float = 0.0
    y: float = 0.0
    z: float = 2.2
    pitch_deg: float = 90.0
    roll_deg: float = 0.0
    yaw_deg: float = 0.0

    @property
    def position(self):
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    def axes(self):
        """Camera-to-world rotation; columns are the camera x, y, z axes."""
        p, r, y = (math.radians(a) for a in (self.pitch_deg, self.roll_deg, self.yaw_deg))
        fwd = np.array([math.cos(p) * math.cos(y), math.cos(p) * math.sin(y), -math.sin(p)])
        right = np.array([math.sin(y), -math.cos(y), 0.0])
        down = np.cross(fwd, right)
        cam_x = math.cos(r) * right + math.sin(r) * down
        cam_y = -math.sin(r) * right + math.cos(r) * down
        return np.stack([cam_x, cam_y, fwd], axis=1)


@dataclass
class SceneSpec:
    room: Room = field(default_factory=Room)
    bed: Optional[Bed] = field(default_factory=Bed)
    camera: CameraPose = field(default_factory=CameraPose)
    noise_sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    intrinsics: Optional[Intrinsics] = None

    def validate(self):
        c, room = self.camera, self.room
        if not c.z > 0:
            raise ValueError("camera must be above the floor")
        if room.x_min >= room.x_max or room.y_min >= room.y_max:
            raise ValueError("empty room")
        if not (room.x_min < c.x < room.x_max and room.y_min < c.y < room.y_max):
            raise ValueError("camera outside the room")
        if not (self.noise_sigma >= 0 and 0 <= self.dropout <= 1):
            raise ValueError("noise and dropout must be non-negative, dropout at most 1")
        if self.bed is not None:
            corners = self.bed.rect.corners()
            if (corners[:, 0].min() < room.x_min or corners[:, 0].max() > room.x_max
                    or corners[:, 1].min() < room.y_min or corners[:, 1].max() > room.y_max):
                raise ValueError("bed outside the room")
            if not self.bed.height_m > 0:
                raise ValueError("bed height must be positive")
            if self.bed.rect.contains(c.position[:2]) and c.z <= self.bed.height_m:
                raise ValueError("camera inside the bed")

    def to_dict(self):
        d = {
            "room": asdict(self.room),
            "bed": None if self.bed is None else asdict(self.bed),
            "camera": asdict(self.camera),
            "noise_sigma": self.noise_sigma,
            "dropout": self.dropout,
            "seed": self.seed,
        }
        if self.intrinsics is not None:
            d["intrinsics"] = self.intrinsics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"room", "bed", "camera", "noise_sigma", "dropout", "seed", "intrinsics"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        bed = d.get("bed", {})
        return cls(
            room=Room(**d.get("room", {})),
            bed=None if bed is None else Bed(**bed),
            camera=CameraPose(**d.get("camera", {})),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            dropout=float(d.get("dropout", 0.0)),
            seed=int(d.get("seed", 0)),
            intrinsics=Intrinsics.from_dict(d["intrinsics"]) if d.get("intrinsics") else None,
        )

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SceneRender:
    frame: ToFFrame
    ground_truth: GroundTruth
    floor_mask: SegMask
    object_mask: SegMask
    world_points: np.ndarray
    hit: np.ndarray
    world_to_camera: np.ndarray

    def as_tuple(self):
        return self.frame, self.ground_truth, self.floor_mask, self.object_mask


def _box_hit(origin, dirs, bed):
    """Ray/box intersection in the bed's local frame; returns (t, world normal)."""
    th = math.radians(bed.theta_deg)
    u = np.array([math.cos(th), math.sin(th), 0.0])
    v = np.array([-math.sin(th), math.cos(th), 0.0])
    w = np.array([0.0, 0.0, 1.0])
    basis = np.stack([u, v, w])
    o = basis @ (origin - np.array([bed.cx, bed.cy, 0.0]))
    d = dirs @ basis.T
    lo = np.array([-bed.length_m / 2, -bed.width_m / 2, 0.0])
    hi = np.array([bed.length_m / 2, bed.width_m / 2, bed.height_m])
    n = dirs.shape[0]
    t_near = np.full(n, -np.inf)
    t_far = np.full(n, np.inf)
    near_axis = np.zeros(n, np.int64)
    miss = np.zeros(n, bool)
    for a in range(3):
        da = d[:, a]
        par = da == 0
        miss |= par & ((o[a] < lo[a]) | (o[a] > hi[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[a] - o[a]) / da
            t2 = (hi[a] - o[a]) / da
        tmin = np.where(par, -np.inf, np.minimum(t1, t2))
        tmax = np.where(par, np.inf, np.maximum(t1, t2))
        better = tmin > t_near
        near_axis = np.where(better, a, near_axis)
        t_near = np.maximum(t_near, tmin)
        t_far = np.minimum(t_far, tmax)
    hit = ~miss & (t_near <= t_far) & (t_near > 0)
    t = np.where(hit, t_near, np.inf)
    sign = -np.sign(d[np.arange(n), near_axis])
    normals = basis[near_axis] * sign[:, None]
    return t, normals


def render_scene(spec, intrinsics=None):
    """Ray-cast ``spec``; depth is the camera Z of the nearest hit."""
    spec.validate()
    intr = intrinsics or spec.intrinsics or default_intrinsics()
    h, w = intr.shape
    M = spec.camera.axes()
    C = spec.camera.position
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    dcam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], -1).reshape(-1, 3)
    dirs = dcam @ M.T
    n = dirs.shape[0]

    t_best = np.full(n, np.inf)
    kind = np.full(n, HIT_NONE, np.int64)
    normal = np.zeros((n, 3))

    def take(t, k, nrm):
        better = t < t_best
        t_best[better] = t[better]
        kind[better] = k
        normal[better] = nrm[better] if np.ndim(nrm) == 2 else nrm

    with np.errstate(divide="ignore", invalid="ignore"):
        tf = np.where(dirs[:, 2] < 0, -C[2] / dirs[:, 2], np.inf)
    take(tf, HIT_FLOOR, np.array([0.0, 0.0, 1.0]))

    room = spec.room
    if room.walls:
        for axis, bound, inward in ((0, room.x_min, 1.0), (0, room.x_max, -1.0),
                                    (1, room.y_min, 1.0), (1, room.y_max, -1.0)):
            da = dirs[:, axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                tw = (bound - C[axis]) / da
            tw = np.where((da * inward < 0) & (tw > 0), tw, np.inf)
            nrm = np.zeros(3)
            nrm[axis] = inward
            take(tw, HIT_WALL, nrm)

    if spec.bed is not None:
        tb, nb = _box_hit(C, dirs, spec.bed)
        take(tb, HIT_BED, nb)

    hit = np.isfinite(t_best)
    world = C + dirs * np.where(hit, t_best, np.nan)[:, None]
    cos_inc = np.abs(np.einsum("ij,ij->i", normal, dirs)) / np.linalg.norm(dirs, axis=1)
    intensity = np.where(hit, np.rint(cos_inc * INTENSITY_SCALE), 0.0)

    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(n) * spec.noise_sigma
    drop = rng.random(n) < spec.dropout
    depth = t_best + noise if spec.noise_sigma > 0 else t_best.copy()
    valid = hit & ~drop & (depth > 0) & (depth <= 20.0)
    depth = np.where(valid, depth, 0.0)

    frame = ToFFrame(intensity.reshape(h, w), depth.reshape(h, w), valid.reshape(h, w), intr)
    kind = kind.reshape(h, w)
    floor_mask = SegMask((kind == HIT_FLOOR) & frame.valid, MaskClass.FLOOR)
    object_mask = SegMask((kind == HIT_BED) & frame.valid, MaskClass.OBJECT)

    plane = GroundPlane(M.T @ np.array([0.0, 0.0, 1.0]), float(C[2]))
    bed_rect = gt_rect(spec, plane) if spec.bed is not None else None
    gt = GroundTruth(plane.normal, plane.offset, bed_rect, floor_mask, object_mask)
    return SceneRender(frame, gt, floor_mask, object_mask, world.reshape(h, w, 3), kind, M.T)


def render(spec, intrinsics=None):
    """``(frame, ground_truth, floor_mask, object_mask)`` for ``spec``."""
    return render_scene(spec, intrinsics).as_tuple()


def world_to_ground_2d(spec, plane=None):
    """2D rotation and translation taking world xy to the ground frame built from the true plane."""
    M = spec.camera.axes()
    C = spec.camera.position
    if plane is None:
        plane = GroundPlane(M.T @ np.array([0.0, 0.0, 1.0]), float(C[2]))
    T = build_ground_transform(plane)
    R3 = T.rotation @ M.T
    t3 = T.rotation @ (-M.T @ C)
    t3[2] += T.translation_z
    return R3[:2, :2], t3[:2]


def gt_rect(spec, plane=None):
    """The bed footprint expressed in the ground frame of the true floor plane."""
    R2, t2 = world_to_ground_2d(spec, plane)
    bed = spec.bed
    c = R2 @ np.array([bed.cx, bed.cy]) + t2
    th = math.radians(bed.theta_deg)
    d = R2 @ np.array([math.cos(th), math.sin(th)])
    return RectModel(c[0], c[1], math.atan2(d[1], d[0]), bed.width_m, bed.length_m)


# ---------------------------------------------------------------------------
# Scene generators used by tests and the acceptance suite
# ---------------------------------------------------------------------------

def bed_in_view(spec, intrinsics=None, margin_px=2.0):
    """True if all eight corners of the bed box project inside the image."""
    intr = intrinsics or spec.intrinsics or default_intrinsics()
    M = spec.camera.axes()
    C = spec.camera.position
    corners2 = spec.bed.rect.corners()
    pts = np.concatenate([np.c_[corners2, np.zeros(4)], np.c_[corners2, np.full(4, spec.bed.height_m)]])
    cam = (pts - C) @ M
    if np.any(cam[:, 2] <= 0.1):
        return False
    u = cam[:, 0] * intr.fx / cam[:, 2] + intr.cx
    v = cam[:, 1] * intr.fy / cam[:, 2] + intr.cy
    return bool(np.all((u >= margin_px) & (u <= intr.width - 1 - margin_px)
                       & (v >= margin_px) & (v <= intr.height - 1 - margin_px)))


def random_floor_scene(seed, noise_sigma=0.005, height=(1.8, 2.8), pitch=(10.0, 60.0), roll=(-10.0, 10.0)):
    """Random camera pose over a room containing one bed away from the camera."""
    rng = np.random.default_rng([7001, seed])
    cam = CameraPose(0.0, 0.0, rng.uniform(*height), rng.uniform(*pitch), rng.uniform(*roll),
                     rng.uniform(0.0, 360.0))
    yaw = math.radians(cam.yaw_deg)
    dist = rng.uniform(2.0, 3.0)
    shape = DEFAULT_SHAPES[rng.integers(len(DEFAULT_SHAPES))]
    bed = Bed(dist * math.cos(yaw), dist * math.sin(yaw), rng.uniform(0.0, 180.0), shape[0], shape[1],
              rng.uniform(0.45, 0.65))
    return SceneSpec(Room(), bed, cam, noise_sigma, 0.0, int(seed))


def random_bed_scene(seed, noise_sigma=0.005, shapes=DEFAULT_SHAPES, height=(1.8, 2.8), pitch=(35.0, 75.0),
                     roll=(-10.0, 10.0), intrinsics=None, max_tries=200):
    """Random scene whose bed is entirely in view."""
    rng = np.random.default_rng([7002, seed])
    for _ in range(max_tries):
        shape = shapes[rng.integers(len(shapes))]
        bed = Bed(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.0, 180.0), shape[0], shape[1],
                  rng.uniform(0.45, 0.65))
        cam_z = rng.uniform(*height)
        pitch_deg = rng.uniform(*pitch)
        yaw_deg = rng.uniform(0.0, 360.0)
        yaw = math.radians(yaw_deg)
        reach = (cam_z - bed.height_m / 2) / math.tan(math.radians(pitch_deg))
        aim = np.array([bed.cx, bed.cy]) + rng.uniform(-0.2, 0.2, 2)
        cx, cy = aim - reach * np.array([math.cos(yaw), math.sin(yaw)])
        cam = CameraPose(float(cx), float(cy), cam_z, pitch_deg, rng.uniform(*roll), yaw_deg)
        spec = SceneSpec(Room(), bed, cam, noise_sigma, 0.0, int(seed), intrinsics)
        try:
            spec.validate()
        except ValueError:
            continue
        if bed_in_view(spec, intrinsics):
            return spec
    raise RuntimeError(f"no valid scene found for seed {seed}")


def occlude_mask(mask, fraction):
    """Drop the leftmost ``fraction`` of a mask's pixels (column-major sweep),
    as an occluder entering the view from the left would."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    rows, cols = np.nonzero(mask.label)
    order = np.lexsort((rows, cols))
    drop = int(round(fraction * order.size))
    label = mask.label.copy()
    label[rows[order[:drop]], cols[order[:drop]]] = False
    return SegMask(label, mask.class_tag)
