"""Back-projection, hash-grid neighbour search and surface normals.

Depth is the Z coordinate along the optical axis (not ray length), so pixel
``(u, v)`` with depth ``d`` lands at ``((u - cx) d / fx, (v - cy) d / fy, d)``.
Camera axes: X grows with the column index, Y with the row index, Z forward.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .frame_io import write_pgm

XYZ_EXPORT_SCALE = 1e-3
NORMAL_EXPORT_SCALE = 1.0 / 32767
_EXPORT_ZERO = 32768


class FrameTag(str, enum.Enum):
    CAMERA = "camera"
    GROUND = "ground"


@dataclass
class PointCloud:
    """Per-pixel 3D points, shape (height, width, 3); NaN where invalid."""

    points: np.ndarray
    valid: np.ndarray
    source: Optional[str] = None

    @property
    def shape(self):
        return self.valid.shape

    def valid_points(self):
        """Valid points in row-major pixel order and their flat pixel indices."""
        flat = np.flatnonzero(self.valid)
        return self.points.reshape(-1, 3)[flat], flat

    @classmethod
    def from_points(cls, pts, source=None):
        """Wrap an unstructured (N, 3) array as an N x 1 "image"."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 1, 3)
        return cls(pts.copy(), np.isfinite(pts).all(axis=2), source)


@dataclass
class NormalMap:
    """Unit normals, shape (height, width, 3); NaN rows mark missing normals."""

    normals: np.ndarray
    frame_tag: FrameTag = FrameTag.CAMERA

    @property
    def has_normal(self):
        return np.isfinite(self.normals).all(axis=-1)


def pixel_grid(intrinsics):
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    return u.astype(np.float64), v.astype(np.float64)


def backproject(frame, source=None):
    intr = frame.intrinsics
    u, v = pixel_grid(intr)
    z = np.where(frame.valid, frame.depth, np.nan)
    pts = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=-1)
    return PointCloud(pts, frame.valid.copy(), source)


def project(points, intrinsics):
    """Pixel coordinates ``(u, v)`` of camera-frame points."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return points[..., 0] * intrinsics.fx / z + intrinsics.cx, points[..., 1] * intrinsics.fy / z + intrinsics.cy


class SpatialIndex:
    """Uniform hash grid over 3D points.

    Points are bucketed into cubic cells of edge ``cell``; a radius query
    visits the cells within ``ceil(radius / cell)`` rings of the query cell.
    ``ids`` (default ``arange(N)``) label the points and break distance ties,
    so results do not depend on bucket order.
    """

    def __init__(self, points, cell, ids=None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("index points must be finite")
        if cell <= 0:
            raise ValueError("cell size must be positive")
        ids = np.arange(points.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        self.cell = float(cell)
        self.size = points.shape[0]
        if self.size == 0:
            self.gmin = np.zeros(3)
            self.dims = np.ones(3, np.int64)
            coords = np.zeros((0, 3), np.int64)
        else:
            self.gmin = points.min(axis=0)
            coords = np.floor((points - self.gmin) / self.cell).astype(np.int64)
            self.dims = coords.max(axis=0) + 1
        keys = (coords[:, 0] * self.dims[1] + coords[:, 1]) * self.dims[2] + coords[:, 2]
        order = np.lexsort((ids, keys))
        self.points = np.ascontiguousarray(points[order])
        self.ids = np.ascontiguousarray(ids[order])
        sorted_keys = keys[order]
        self.keys, self.starts, counts = np.unique(sorted_keys, return_index=True, return_counts=True)
        self.starts = self.starts.astype(np.int64)
        self.ends = self.starts + counts

    @classmethod
    def from_cloud(cls, cloud, radius):
        pts, flat = cloud.valid_points()
        # a hair wider than the radius so float rounding never hides a neighbour two cells away
        return cls(pts, radius * (1 + 1e-9), ids=flat)

    def query(self, queries, radius, k, exclude=None):
        """Batched radius-limited kNN; see :func:`tofloc.kernels.knn_query`."""
        queries = np.ascontiguousarray(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
        if exclude is None:
            exclude = np.full(queries.shape[0], -1, np.int64)
        exclude = np.ascontiguousarray(exclude, dtype=np.int64)
        if self.size == 0 or k <= 0:
            nq = queries.shape[0]
            return (np.full((nq, max(k, 0)), -1, np.int64), np.full((nq, max(k, 0)), np.inf),
                    np.zeros(nq, np.int64))
        rings = max(1, int(np.ceil(radius / self.cell)))
        return kernels.knn_query(self.points, self.ids, self.keys, self.starts, self.ends,
                                 self.gmin, self.cell, self.dims, queries, exclude, radius, k, rings)


def radius_knn(index, query, radius, k):
    """The ``k`` nearest indexed points within ``radius`` of ``query``.

    Returns ``(ids, distances)`` sorted by distance, ties by id.
    """
    idx, d2, n = index.query(np.asarray(query, dtype=np.float64)[None, :], radius, k)
    m = int(n[0])
    return idx[0, :m].copy(), np.sqrt(d2[0, :m])


def normals_from_neighbors(centers, nbr_pts, counts, min_neighbors=3):
    """Plane normals through each neighbourhood, oriented toward the origin.

    ``nbr_pts`` is (Q, k, 3) padded arbitrarily past ``counts``. The normal is
    the eigenvector of the neighbour scatter matrix with the smallest
    eigenvalue, i.e. the smallest right singular vector of the centered
    neighbour matrix.
    """
    q, k = nbr_pts.shape[:2]
    out = np.full((q, 3), np.nan)
    ok = counts >= min_neighbors
    if not np.any(ok):
        return out
    w = (np.arange(k)[None, :] < counts[:, None])[ok].astype(np.float64)
    p = nbr_pts[ok]
    p = np.where(w[..., None] > 0, p, 0.0)
    mean = p.sum(axis=1) / w.sum(axis=1)[:, None]
    c = (p - mean[:, None, :]) * w[..., None]
    scatter = np.einsum("qki,qkj->qij", c, c)
    _, vecs = np.linalg.eigh(scatter)
    n = vecs[:, :, 0]
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("qi,qi->q", n, centers[ok]) > 0
    n[flip] *= -1
    out[ok] = n
    return out


def estimate_normals(cloud, radius=0.10, k=10, min_neighbors=3, index=None):
    """Per-pixel normals from the ``k`` closest other points within ``radius``.

    Pixels with fewer than ``min_neighbors`` such neighbours get no normal.
    Normals point toward the sensor: ``n . p < 0``.
    """
    if index is None:
        index = SpatialIndex.from_cloud(cloud, radius)
    pts, flat = cloud.valid_points()
    nbr, _, counts = index.query(pts, radius, k, exclude=flat)
    all_pts = cloud.points.reshape(-1, 3)
    nbr_pts = all_pts[np.where(nbr >= 0, nbr, flat[:, None])]
    normals = np.full((cloud.valid.size, 3), np.nan)
    normals[flat] = normals_from_neighbors(pts, nbr_pts, counts, min_neighbors)
    return NormalMap(normals.reshape(cloud.points.shape), FrameTag.CAMERA)


# ---------------------------------------------------------------------------
# Debug export
# ---------------------------------------------------------------------------

def _encode(values, scale):
    enc = np.rint(values / scale) + _EXPORT_ZERO
    enc = np.where(np.isfinite(values), enc, _EXPORT_ZERO)
    return np.clip(enc, 0, 65535).astype(np.uint16)


def export_xyz(cloud, prefix):
    """Write X/Y/Z as three 16-bit PGMs, 1 unit = 1 mm, offset 32768; invalid = 0 m."""
    paths = []
    for axis, name in enumerate("xyz"):
        path = f"{prefix}{name}.pgm"
        write_pgm(path, _encode(cloud.points[..., axis], XYZ_EXPORT_SCALE), 65535)
        paths.append(path)
    return paths


def export_normals(normals, prefix):
    """Write normal components as three 16-bit PGMs, 1 unit = 1/32767, offset 32768."""
    paths = []
    for axis, name in enumerate("xyz"):
        path = f"{prefix}{name}.pgm"
        write_pgm(path, _encode(normals.normals[..., axis], NORMAL_EXPORT_SCALE), 65535)
        paths.append(path)
    return paths


def export_map(values, path, scale):
    """Write one scalar map as a 16-bit PGM, value = (raw - 32768) * scale; NaN -> 0."""
    write_pgm(path, _encode(np.asarray(values, dtype=np.float64), scale), 65535)
    return path


def decode_export(raw, scale):
    return (raw.astype(np.float64) - _EXPORT_ZERO) * scale
