"""Ground-plane estimation and the floor-aligned coordinate frame.

Plane convention: ``normal . p + offset = 0`` in camera coordinates, with
the normal pointing toward the camera so that ``offset`` is the camera
height above the floor. The ground frame has z up, z = 0 on the floor and
its x axis along the line where the image plane meets the floor.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConsensusError, DegenerateError
from .pointcloud import FrameTag, NormalMap

_COLLINEAR_TOL = 1e-12
_YAW_EPS = 1e-9


@dataclass
class RansacParams:
    iterations: int = 500
    inlier_threshold: float = 0.02
    min_inlier_fraction: float = 0.3
    seed: int = 42


@dataclass
class GroundPlane:
    normal: np.ndarray
    offset: float
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    rms_residual: float = 0.0
    inlier_fraction: float = 1.0
    threshold: float = np.inf

    def residuals(self, pts):
        return kernels.plane_residuals(np.asarray(pts, dtype=np.float64).reshape(-1, 3),
                                       np.append(self.normal, self.offset))

    def as_array(self):
        return np.append(self.normal, self.offset)


@dataclass
class GroundTransform:
    """Rigid map ``q = rotation @ p + (0, 0, translation_z)`` from camera to ground frame."""

    rotation: np.ndarray
    translation_z: float
    yaw_fallback: bool = False

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        q = pts @ self.rotation.T
        q[..., 2] += self.translation_z
        return q

    def apply_inverse(self, q):
        q = np.array(q, dtype=np.float64)
        q[..., 2] -= self.translation_z
        return q @ self.rotation

    def rotate(self, vecs):
        return np.asarray(vecs, dtype=np.float64) @ self.rotation.T

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation_z": float(self.translation_z)}

    @classmethod
    def from_dict(cls, d):
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        return cls(rot, float(d["translation_z"]))


@dataclass
class HeightMap:
    heights: np.ndarray

    @property
    def valid(self):
        return np.isfinite(self.heights)


def _orient(normal, offset):
    if offset < 0:
        return -normal, -offset
    return normal, offset


def fit_plane_svd(points):
    """Least-squares plane through ``points`` (N >= 3, not collinear)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        raise DegenerateError("a plane needs at least 3 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] == 0 or abs(s[1] - s[2]) <= _COLLINEAR_TOL * max(1.0, s[0]):
        raise DegenerateError("points are collinear or coincident")
    normal = vt[2] / np.linalg.norm(vt[2])
    normal, offset = _orient(normal, -float(normal @ centroid))
    res = kernels.plane_residuals(pts, np.append(normal, offset))
    return GroundPlane(normal, float(offset), np.arange(pts.shape[0]),
                       float(np.sqrt(np.mean(res * res))), 1.0, np.inf)


def ransac_samples(n, iterations, seed):
    """Index triples; triple ``i`` depends only on ``(seed, i)``."""
    out = np.empty((iterations, 3), np.int64)
    for i in range(iterations):
        out[i] = np.random.default_rng([seed, i]).choice(n, 3, replace=False)
    return out


def plane_hypotheses(pts, samples):
    """Exact planes through sampled triples; rows of NaN for degenerate triples."""
    p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n, axis=1)
    ok = norm > 1e-12
    planes = np.full((samples.shape[0], 4), np.nan)
    n = n[ok] / norm[ok, None]
    d = -np.einsum("ij,ij->i", n, p0[ok])
    flip = d < 0
    n[flip] *= -1
    d[flip] *= -1
    planes[ok, :3] = n
    planes[ok, 3] = d
    return planes


def ransac_plane(points, params=None, **overrides):
    """Robust plane: best 3-point consensus, then an SVD refit on its inliers.

    Raises :class:`ConsensusError` if no hypothesis gathers
    ``min_inlier_fraction`` of the points.
    """
    params = params or RansacParams()
    if overrides:
        params = RansacParams(**{**params.__dict__, **overrides})
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    n = pts.shape[0]
    if n < 3:
        raise DegenerateError("RANSAC needs at least 3 points")
    thr = params.inlier_threshold
    planes = plane_hypotheses(pts, ransac_samples(n, params.iterations, params.seed))
    ok = np.flatnonzero(np.isfinite(planes[:, 0]))
    if ok.size == 0:
        raise ConsensusError("every RANSAC sample was degenerate", 0.0)
    counts = kernels.count_inliers(pts, planes[ok], thr)
    best = int(np.argmax(counts))
    best_fraction = counts[best] / n
    if best_fraction < params.min_inlier_fraction:
        raise ConsensusError(
            f"best consensus {best_fraction:.3f} below required {params.min_inlier_fraction:.3f}",
            float(best_fraction))
    hyp = planes[ok[best]]
    inliers = np.flatnonzero(np.abs(kernels.plane_residuals(pts, hyp)) <= thr)
    try:
        refit = fit_plane_svd(pts[inliers])
        plane_arr = refit.as_array()
    except DegenerateError:
        plane_arr = hyp
    res = kernels.plane_residuals(pts, plane_arr)
    final = np.flatnonzero(np.abs(res) <= thr)
    if final.size < 3:
        final = inliers
        plane_arr = hyp
        res = kernels.plane_residuals(pts, plane_arr)
    rms = float(np.sqrt(np.mean(res[final] ** 2)))
    return GroundPlane(plane_arr[:3].copy(), float(plane_arr[3]), final, rms, final.size / n, thr)


def build_ground_transform(plane):
    """Camera-to-ground rigid transform for ``plane``.

    The ground x axis runs along the intersection of the image plane
    (normal = optical axis) with the floor, signed to agree with the camera
    x axis. When the camera looks straight down that line is undefined and
    the camera x axis projected on the floor is used instead.
    """
    ez = np.asarray(plane.normal, dtype=np.float64)
    ez = ez / np.linalg.norm(ez)
    line = np.cross([0.0, 0.0, 1.0], ez)
    norm = np.linalg.norm(line)
    fallback = norm <= _YAW_EPS
    if fallback:
        ex = np.array([1.0, 0.0, 0.0]) - ez[0] * ez
        ex /= np.linalg.norm(ex)
    else:
        ex = line / norm
        if ex[0] < 0 or (ex[0] == 0 and ex[1] < 0):
            ex = -ex
    ey = np.cross(ez, ex)
    ey /= np.linalg.norm(ey)
    return GroundTransform(np.stack([ex, ey, ez]), float(plane.offset), bool(fallback))


def compute_height_map(cloud, transform):
    q = transform.apply(cloud.points)
    return HeightMap(np.where(cloud.valid, q[..., 2], np.nan))


def transform_normals(normals, transform):
    if normals.frame_tag != FrameTag.CAMERA:
        raise ValueError("expected camera-frame normals")
    return NormalMap(transform.rotate(normals.normals), FrameTag.GROUND)


@dataclass
class Calibration:
    plane: GroundPlane
    transform: GroundTransform
    inlier_mask: np.ndarray

    @property
    def inlier_fraction(self):
        return self.plane.inlier_fraction

    def to_dict(self, angle_error_deg=None):
        return {
            "normal": [float(v) for v in self.plane.normal],
            "offset": float(self.plane.offset),
            "rotation": self.transform.rotation.tolist(),
            "translation_z": float(self.transform.translation_z),
            "inlier_fraction": float(self.plane.inlier_fraction),
            "angle_error_deg": None if angle_error_deg is None else float(angle_error_deg),
        }

    @classmethod
    def from_dict(cls, d, shape=None):
        plane = GroundPlane(np.asarray(d["normal"], dtype=np.float64), float(d["offset"]),
                            inlier_fraction=float(d.get("inlier_fraction", 1.0)))
        transform = GroundTransform.from_dict(d)
        mask = np.zeros(shape if shape is not None else (0, 0), bool)
        return cls(plane, transform, mask)


def calibrate(cloud, floor_mask=None, params=None):
    """Fit the floor from ``floor_mask`` pixels, or from every valid pixel if None."""
    sel = cloud.valid.copy()
    if floor_mask is not None:
        if floor_mask.shape != cloud.shape:
            raise ValueError("floor mask and cloud differ in size")
        sel &= floor_mask.label
    flat = np.flatnonzero(sel)
    plane = ransac_plane(cloud.points.reshape(-1, 3)[flat], params)
    inlier_mask = np.zeros(cloud.valid.size, bool)
    inlier_mask[flat[plane.inliers]] = True
    plane.inliers = flat[plane.inliers]
    return Calibration(plane, build_ground_transform(plane), inlier_mask.reshape(cloud.shape))
