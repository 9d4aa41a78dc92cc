"""Rectangle localization on the rasterized ground-plane footprint.

The segmented object points are projected onto the floor, binned into a
square grid, and a rectangle is fitted by exhaustive local search over
position, orientation and a list of standard shapes, maximizing the
cell IoU between rectangle and occupied cells. That IoU doubles as the
confidence used to accept or reject the localization.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .rect import RectModel

DEFAULT_SHAPES = ((0.90, 2.00), (1.00, 2.00), (1.20, 2.00), (0.90, 2.10))
DEFAULT_CELL = 0.05
DEFAULT_THRESHOLD = 0.5
COVERAGE_RULES = ("overlap", "center")


@dataclass
class RasterGrid:
    """Occupancy of square cells; row ``r``, column ``c`` spans
    ``origin + (c, r) * cell_size`` to ``origin + (c + 1, r + 1) * cell_size``."""

    cell_size: float
    origin: np.ndarray
    occupancy: np.ndarray
    counts: np.ndarray
    index_origin: tuple = (0, 0)

    @property
    def n_occupied(self):
        return int(np.count_nonzero(self.occupancy))

    @property
    def prefix(self):
        occ = self.occupancy.astype(np.int64)
        out = np.zeros((occ.shape[0], occ.shape[1] + 1), np.int64)
        np.cumsum(occ, axis=1, out=out[:, 1:])
        return out

    def cell_centers(self, occupied_only=True):
        rows, cols = np.nonzero(self.occupancy) if occupied_only else np.indices(self.occupancy.shape).reshape(2, -1)
        return np.c_[self.origin[0] + (cols + 0.5) * self.cell_size, self.origin[1] + (rows + 0.5) * self.cell_size]


@dataclass
class SearchRanges:
    dx: float = 0.5
    dy: float = 0.5
    step: float = 0.05
    dtheta_deg: float = 15.0
    dtheta_step_deg: float = 1.0
    refine: bool = True
    refine_factor: int = 5
    plateau_tol: float = 0.01

    def fine(self):
        """Ranges of the refinement pass: one coarse step each way, ``refine_factor`` times finer."""
        f = self.refine_factor
        return SearchRanges(self.step, self.step, self.step / f, self.dtheta_step_deg,
                            self.dtheta_step_deg / f, False, f, self.plateau_tol)


@dataclass
class LocalizationResult:
    rect: Optional[RectModel]
    confidence: float
    accepted: bool
    search_stats: dict = field(default_factory=dict)

    @property
    def detected(self):
        return self.rect is not None

    def to_dict(self):
        d = {"detected": self.detected, "confidence": float(self.confidence), "accepted": bool(self.accepted)}
        if self.rect is not None:
            d.update(cx=self.rect.cx, cy=self.rect.cy, theta_deg=self.rect.theta_deg,
                     width=self.rect.width, length=self.rect.length)
        d["search_stats"] = dict(self.search_stats)
        return d


def no_detection(reason="empty"):
    return LocalizationResult(None, 0.0, False, {"candidates": 0, "reason": reason})


def project_to_ground(cloud, mask, transform):
    """Floor-plane ``(x, y)`` of masked valid points, shape (N, 2)."""
    if mask.shape != cloud.shape:
        raise ValueError("mask and cloud differ in size")
    sel = mask.label & cloud.valid
    return transform.apply(cloud.points[sel])[:, :2]


def rasterize(points2d, cell_size=DEFAULT_CELL, min_points_per_cell=1, margin=0.0):
    """Bin 2D points into cells aligned to multiples of ``cell_size``."""
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("cannot rasterize an empty point set")
    if cell_size <= 0 or min_points_per_cell < 1:
        raise ValueError("cell size must be positive and min_points_per_cell >= 1")
    idx = np.floor(pts / cell_size).astype(np.int64)
    pad = int(math.ceil(margin / cell_size - 1e-9)) if margin > 0 else 0
    lo = idx.min(axis=0) - pad
    hi = idx.max(axis=0) + pad
    ncols, nrows = (hi - lo + 1).tolist()
    counts = np.zeros((nrows, ncols), np.int64)
    np.add.at(counts, (idx[:, 1] - lo[1], idx[:, 0] - lo[0]), 1)
    origin = lo.astype(np.float64) * cell_size
    return RasterGrid(float(cell_size), origin, counts >= min_points_per_cell, counts, (int(lo[0]), int(lo[1])))


def init_rect(points2d, shapes=DEFAULT_SHAPES):
    """Rectangle at the centroid, long side along the principal direction.

    Returns ``(rect, degenerate)``; ``degenerate`` is set when the principal
    direction is ill-defined (coincident or nearly isotropic points).
    """
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no points")
    center = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - center, full_matrices=False)
    if s.size < 2 or s[0] <= 1e-12:
        theta, degenerate = 0.0, True
    else:
        theta = math.atan2(vt[0, 1], vt[0, 0])
        degenerate = bool((s[0] - s[1]) <= 0.05 * s[0])
    w, l = shapes[0]
    return RectModel(center[0], center[1], theta, w, l), degenerate


def _normalize_angles(t):
    t = np.fmod(t, math.pi)
    t = np.where(t < 0, t + math.pi, t)
    return np.where(t >= math.pi, 0.0, t)


def score_rects(grid, cx, cy, theta, width, length, coverage="overlap"):
    """Cell IoU of each rectangle against ``grid``.

    With ``coverage="overlap"`` a rectangle covers every cell it shares area
    with, mirroring how a cell becomes occupied; ``"center"`` covers only
    the cells whose centers fall inside it.
    """
    theta = np.asarray(theta, dtype=np.float64)
    inter, cover = kernels.score_rects(grid.prefix, grid.origin, grid.cell_size, cx, cy,
                                       np.cos(theta), np.sin(theta),
                                       np.asarray(length, dtype=np.float64) / 2,
                                       np.asarray(width, dtype=np.float64) / 2, coverage)
    union = grid.n_occupied + cover - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def raster_iou(rect, grid, coverage="overlap"):
    """IoU between the cells covered by ``rect`` and the occupied cells."""
    return float(score_rects(grid, [rect.cx], [rect.cy], [rect.theta], [rect.width], [rect.length],
                             coverage)[0])


def candidate_table(init, shapes, ranges, orientations=2):
    """Every searched rectangle plus the integer keys used for tie-breaking."""
    nx = int(round(ranges.dx / ranges.step))
    ny = int(round(ranges.dy / ranges.step))
    nt = int(round(ranges.dtheta_deg / ranges.dtheta_step_deg))
    s_i, b_i, t_i, y_i, x_i = np.meshgrid(np.arange(len(shapes)), np.arange(orientations), np.arange(-nt, nt + 1),
                                          np.arange(-ny, ny + 1), np.arange(-nx, nx + 1), indexing="ij")
    s_i, b_i, t_i, y_i, x_i = (a.reshape(-1) for a in (s_i, b_i, t_i, y_i, x_i))
    shp = np.asarray(shapes, dtype=np.float64)
    widths = np.minimum(shp[:, 0], shp[:, 1])[s_i]
    lengths = np.maximum(shp[:, 0], shp[:, 1])[s_i]
    rot_deg = b_i * 90.0 + t_i * ranges.dtheta_step_deg
    theta = _normalize_angles(init.theta + np.radians(rot_deg))
    cx = init.cx + x_i * ranges.step
    cy = init.cy + y_i * ranges.step
    keys = {"disp2": x_i * x_i + y_i * y_i, "rot": np.abs(rot_deg), "shape": s_i}
    return cx, cy, theta, widths, lengths, keys


def _best(grid, init, shapes, ranges, orientations, coverage, plateau_tol=None):
    cx, cy, theta, widths, lengths, keys = candidate_table(init, shapes, ranges, orientations)
    iou = score_rects(grid, cx, cy, theta, widths, lengths, coverage)
    tied = np.flatnonzero(iou == iou.max())
    order = np.lexsort((tied, keys["shape"][tied], keys["rot"][tied], keys["disp2"][tied]))
    b = tied[order[0]]
    best = RectModel(cx[b], cy[b], theta[b], widths[b], lengths[b])
    if not plateau_tol:
        return best, None, int(iou.size), int(tied.size)
    # mean pose of the near-optimal candidates of the winning shape; the
    # argmax alone jitters with the cell quantization of the objective
    sel = (iou >= iou[b] - plateau_tol) & (widths == widths[b]) & (lengths == lengths[b])
    rot = np.fmod(theta[sel] - init.theta + 2.5 * math.pi, math.pi) - math.pi / 2
    mean = RectModel(cx[sel].mean(), cy[sel].mean(), init.theta + rot.mean(), widths[b], lengths[b])
    return best, mean, int(iou.size), int(np.count_nonzero(sel))


def grid_search(grid, init, shapes=DEFAULT_SHAPES, ranges=None, coverage="overlap"):
    """Exhaustive local search maximizing :func:`raster_iou`.

    Both ``init.theta`` and ``init.theta + 90 deg`` seed the orientation
    sweep. Ties go to the smallest displacement from ``init``, then the
    smallest rotation, then the earliest shape. With ``ranges.refine`` a
    second, finer sweep is centered on the coarse winner, and the result is
    the mean pose of the fine candidates scoring within ``plateau_tol`` of
    the best (same shape). The result never scores below ``init``.
    """
    ranges = ranges or SearchRanges()
    if coverage not in COVERAGE_RULES:
        raise ValueError(f"unknown coverage rule {coverage!r}")
    if grid.n_occupied == 0:
        return no_detection("empty grid")
    rect, _, n_cand, ties = _best(grid, init, shapes, ranges, 2, coverage)
    coarse_iou = raster_iou(rect, grid, coverage)
    init_iou = raster_iou(init, grid, coverage)
    if ranges.refine:
        rect, mean, n_fine, ties = _best(grid, rect, shapes, ranges.fine(), 1, coverage, ranges.plateau_tol)
        n_cand += n_fine
        if mean is not None and raster_iou(mean, grid, coverage) >= init_iou:
            rect = mean
    confidence = raster_iou(rect, grid, coverage)
    stats = {"candidates": n_cand, "init_iou": init_iou, "coarse_iou": coarse_iou,
             "gain": confidence - init_iou, "ties": ties}
    return LocalizationResult(rect, confidence, False, stats)


def gate(result, threshold=DEFAULT_THRESHOLD):
    return replace(result, accepted=bool(result.detected and result.confidence >= threshold))


def localize(points2d, shapes=DEFAULT_SHAPES, cell_size=DEFAULT_CELL, min_points_per_cell=1,
             ranges=None, threshold=DEFAULT_THRESHOLD, coverage="overlap"):
    """Rasterize, initialize, search and gate. Returns ``(result, grid)``.

    ``threshold=None`` skips the gate and leaves ``accepted`` False.

    The initial rectangle is taken from the occupied cell centers rather
    than the raw points, so uneven sampling density (near parts of the
    object get more pixels) does not bias the start of the search.
    """
    ranges = ranges or SearchRanges()
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return no_detection("no object points"), None
    margin = max(ranges.dx, ranges.dy) + max(max(s) for s in shapes) / 2
    grid = rasterize(pts, cell_size, min_points_per_cell, margin)
    if grid.n_occupied == 0:
        return no_detection("no occupied cells"), grid
    init, degenerate = init_rect(grid.cell_centers(), shapes)
    result = grid_search(grid, init, shapes, ranges, coverage)
    result.search_stats["degenerate_init"] = degenerate
    return (result if threshold is None else gate(result, threshold)), grid


def covered_cells(grid, rect, coverage="overlap"):
    """Boolean (rows, cols) mask of the grid cells ``rect`` covers."""
    centers = grid.cell_centers(occupied_only=False)
    if coverage == "center":
        return rect.contains(centers).reshape(grid.occupancy.shape)
    # separating axes: a cell and the rectangle share area iff their
    # projections overlap by a positive amount on all four edge normals
    h = grid.cell_size / 2
    u, v = rect.axes()
    corners = rect.corners()
    ok = np.ones(centers.shape[0], bool)
    for k in range(2):
        lo, hi = corners[:, k].min(), corners[:, k].max()
        ok &= (np.minimum(hi, centers[:, k] + h) - np.maximum(lo, centers[:, k] - h)) > 1e-9
    for axis, half in ((u, rect.length / 2), (v, rect.width / 2)):
        c0 = float(axis @ [rect.cx, rect.cy])
        reach = h * (abs(axis[0]) + abs(axis[1]))
        proj = centers @ axis
        ok &= (np.minimum(c0 + half, proj + reach) - np.maximum(c0 - half, proj - reach)) > 1e-9
    return ok.reshape(grid.occupancy.shape)


def debug_image(grid, rect=None, coverage="overlap"):
    """8-bit picture of the grid: 255 occupied and covered, 170 occupied only,
    85 covered only, 0 neither. Row 0 is the lowest y."""
    img = np.where(grid.occupancy, 170, 0).astype(np.uint8)
    if rect is not None:
        covered = covered_cells(grid, rect, coverage)
        img[covered & grid.occupancy] = 255
        img[covered & ~grid.occupancy] = 85
    return img
