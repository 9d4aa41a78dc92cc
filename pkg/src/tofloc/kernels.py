"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public functions here dispatch on :func:`tofloc._accel.backend`. The two
implementations perform the same floating-point operations in the same order,
so their outputs are bit-identical; ``tests/test_kernels.py`` holds them to it.
"""

import numpy as np

from . import _accel
from ._accel import njit

_NUMPY_QUERY_CHUNK = 1024
_NUMPY_PLANE_CHUNK = 32
_NUMPY_RECT_CHUNK = 4096
_AXIS_EPS = 1e-12
_OVERLAP_EPS = 1e-9


# ---------------------------------------------------------------------------
# Radius-limited k-nearest-neighbour search over a uniform hash grid
# ---------------------------------------------------------------------------

@njit
def _knn_numba(pts, ids, keys, starts, ends, gmin, cell, dims, queries, exclude, radius, k, rings):
    nq = queries.shape[0]
    out_idx = np.full((nq, k), -1, np.int64)
    out_d2 = np.full((nq, k), np.inf)
    counts = np.zeros(nq, np.int64)
    r2 = radius * radius
    nkeys = keys.shape[0]
    for q in range(nq):
        qx = queries[q, 0]
        qy = queries[q, 1]
        qz = queries[q, 2]
        if not (np.isfinite(qx) and np.isfinite(qy) and np.isfinite(qz)):
            continue
        ix = int(np.floor((qx - gmin[0]) / cell))
        iy = int(np.floor((qy - gmin[1]) / cell))
        iz = int(np.floor((qz - gmin[2]) / cell))
        n = 0
        for a in range(ix - rings, ix + rings + 1):
            if a < 0 or a >= dims[0]:
                continue
            for b in range(iy - rings, iy + rings + 1):
                if b < 0 or b >= dims[1]:
                    continue
                for c in range(iz - rings, iz + rings + 1):
                    if c < 0 or c >= dims[2]:
                        continue
                    key = (a * dims[1] + b) * dims[2] + c
                    pos = np.searchsorted(keys, key)
                    if pos >= nkeys or keys[pos] != key:
                        continue
                    for j in range(starts[pos], ends[pos]):
                        pid = ids[j]
                        if pid == exclude[q]:
                            continue
                        dx = pts[j, 0] - qx
                        dy = pts[j, 1] - qy
                        dz = pts[j, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 > r2:
                            continue
                        if n == k:
                            last_d2 = out_d2[q, k - 1]
                            if d2 > last_d2 or (d2 == last_d2 and pid > out_idx[q, k - 1]):
                                continue
                            i = k - 1
                        else:
                            i = n
                            n += 1
                        while i > 0 and (out_d2[q, i - 1] > d2 or (out_d2[q, i - 1] == d2 and out_idx[q, i - 1] > pid)):
                            out_d2[q, i] = out_d2[q, i - 1]
                            out_idx[q, i] = out_idx[q, i - 1]
                            i -= 1
                        out_d2[q, i] = d2
                        out_idx[q, i] = pid
        counts[q] = n
    return out_idx, out_d2, counts


def _knn_numpy(pts, ids, keys, starts, ends, gmin, cell, dims, queries, exclude, radius, k, rings):
    nq = queries.shape[0]
    out_idx = np.full((nq, k), -1, np.int64)
    out_d2 = np.full((nq, k), np.inf)
    counts = np.zeros(nq, np.int64)
    r2 = radius * radius
    offsets = np.arange(-rings, rings + 1)
    off = np.stack(np.meshgrid(offsets, offsets, offsets, indexing="ij"), -1).reshape(-1, 3)
    for lo in range(0, nq, _NUMPY_QUERY_CHUNK):
        hi = min(nq, lo + _NUMPY_QUERY_CHUNK)
        q = queries[lo:hi]
        finite = np.isfinite(q).all(axis=1)
        qcell = np.zeros((hi - lo, 3), np.int64)
        qcell[finite] = np.floor((q[finite] - gmin) / cell).astype(np.int64)
        qi_parts, start_parts, len_parts = [], [], []
        for o in off:
            nc = qcell + o
            inb = finite & np.all((nc >= 0) & (nc < dims), axis=1)
            key = (nc[:, 0] * dims[1] + nc[:, 1]) * dims[2] + nc[:, 2]
            pos = np.searchsorted(keys, key)
            posc = np.minimum(pos, keys.shape[0] - 1)
            found = inb & (pos < keys.shape[0]) & (keys[posc] == key)
            sel = np.nonzero(found)[0]
            qi_parts.append(sel)
            start_parts.append(starts[posc[sel]])
            len_parts.append(ends[posc[sel]] - starts[posc[sel]])
        qi = np.concatenate(qi_parts)
        st = np.concatenate(start_parts)
        ln = np.concatenate(len_parts)
        total = int(ln.sum())
        if total == 0:
            continue
        base = np.repeat(np.cumsum(ln) - ln, ln)
        j = np.arange(total) - base + np.repeat(st, ln)
        qi = np.repeat(qi, ln)
        d = pts[j] - q[qi]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        pid = ids[j]
        keep = (d2 <= r2) & (pid != exclude[lo:hi][qi])
        qi, d2, pid = qi[keep], d2[keep], pid[keep]
        order = np.lexsort((pid, d2, qi))
        qi, d2, pid = qi[order], d2[order], pid[order]
        group_start = np.searchsorted(qi, qi, side="left")
        rank = np.arange(qi.shape[0]) - group_start
        take = rank < k
        out_idx[lo + qi[take], rank[take]] = pid[take]
        out_d2[lo + qi[take], rank[take]] = d2[take]
        counts[lo:hi] = np.minimum(np.bincount(qi, minlength=hi - lo), k)
    return out_idx, out_d2, counts


def knn_query(pts, ids, keys, starts, ends, gmin, cell, dims, queries, exclude, radius, k, rings):
    """Up to ``k`` nearest indexed points within ``radius`` of each query.

    ``pts``/``ids`` are the indexed points sorted by cell key; ``keys``,
    ``starts``, ``ends`` describe the occupied cells. Returns ``(ids, d2,
    counts)`` with rows ordered by (squared distance, id) and padded with
    ``-1`` / ``inf``. A query never returns the id given in ``exclude``.
    """
    fn = _knn_numba if _accel.backend() == "numba" else _knn_numpy
    return fn(pts, ids, keys, starts, ends, gmin, float(cell), dims, queries, exclude,
              float(radius), int(k), int(rings))


# ---------------------------------------------------------------------------
# Consensus counting for plane hypotheses
# ---------------------------------------------------------------------------

@njit
def _count_inliers_numba(pts, planes, threshold):
    n = pts.shape[0]
    counts = np.zeros(planes.shape[0], np.int64)
    for h in range(planes.shape[0]):
        nx = planes[h, 0]
        ny = planes[h, 1]
        nz = planes[h, 2]
        d = planes[h, 3]
        c = 0
        for i in range(n):
            r = nx * pts[i, 0] + ny * pts[i, 1] + nz * pts[i, 2] + d
            if abs(r) <= threshold:
                c += 1
        counts[h] = c
    return counts


def _count_inliers_numpy(pts, planes, threshold):
    counts = np.zeros(planes.shape[0], np.int64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    for lo in range(0, planes.shape[0], _NUMPY_PLANE_CHUNK):
        p = planes[lo:lo + _NUMPY_PLANE_CHUNK]
        r = p[:, 0:1] * x + p[:, 1:2] * y + p[:, 2:3] * z + p[:, 3:4]
        counts[lo:lo + p.shape[0]] = np.count_nonzero(np.abs(r) <= threshold, axis=1)
    return counts


def plane_residuals(pts, plane):
    """Signed residuals ``n.p + d`` in the same operation order as the kernels."""
    return plane[0] * pts[:, 0] + plane[1] * pts[:, 1] + plane[2] * pts[:, 2] + plane[3]


def count_inliers(pts, planes, threshold):
    """Number of points within ``threshold`` of each plane ``(nx, ny, nz, d)``."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    planes = np.ascontiguousarray(planes, dtype=np.float64)
    if _accel.backend() == "numba":
        return _count_inliers_numba(pts, planes, float(threshold))
    return _count_inliers_numpy(pts, planes, float(threshold))


# ---------------------------------------------------------------------------
# Rasterized rectangle scoring
# ---------------------------------------------------------------------------
#
# Lattice cell (r, c) spans x in ox + [c, c + 1] * cs and y in oy + [r, r + 1] * cs.
# Two coverage rules are supported:
#
#   "overlap": the cell is covered iff it shares positive area with the
#              rectangle (the same rule that makes a cell occupied when any
#              point falls in it);
#   "center":  the cell is covered iff its center lies inside the rectangle.
#
# Either way the covered cells of one lattice row form a contiguous run, so a
# candidate costs O(rows): coverage is counted analytically (also outside the
# grid) and the overlap with occupied cells comes from per-row prefix sums.

@njit
def _line_span(dy, c, s, hl, hw):
    """x-offsets (relative to the center) where a horizontal line at height
    ``dy`` above the center crosses the rectangle; lo > hi if it misses."""
    lo = -np.inf
    hi = np.inf
    if abs(c) > _AXIS_EPS:
        a = (-hl - dy * s) / c
        b = (hl - dy * s) / c
        lo = max(lo, min(a, b))
        hi = min(hi, max(a, b))
    elif abs(dy * s) > hl:
        return np.inf, -np.inf
    if abs(s) > _AXIS_EPS:
        a = (-hw - dy * c) / -s
        b = (hw - dy * c) / -s
        lo = max(lo, min(a, b))
        hi = min(hi, max(a, b))
    elif abs(dy * c) > hw:
        return np.inf, -np.inf
    return lo, hi


@njit
def _score_center_numba(prefix, ox, oy, cs, cx, cy, cos_t, sin_t, half_len, half_wid):
    nrows = prefix.shape[0]
    ncols = prefix.shape[1] - 1
    m = cx.shape[0]
    inter = np.zeros(m, np.int64)
    cover = np.zeros(m, np.int64)
    for i in range(m):
        c = cos_t[i]
        s = sin_t[i]
        ey = half_len[i] * abs(s) + half_wid[i] * abs(c)
        r_lo = int(np.ceil((cy[i] - ey - oy) / cs - 0.5))
        r_hi = int(np.floor((cy[i] + ey - oy) / cs - 0.5))
        n_in = 0
        n_cov = 0
        for r in range(r_lo, r_hi + 1):
            dy = oy + (r + 0.5) * cs - cy[i]
            lo, hi = _line_span(dy, c, s, half_len[i], half_wid[i])
            if lo > hi:
                continue
            c_lo = int(np.ceil((cx[i] + lo - ox) / cs - 0.5))
            c_hi = int(np.floor((cx[i] + hi - ox) / cs - 0.5))
            if c_hi < c_lo:
                continue
            n_cov += c_hi - c_lo + 1
            if 0 <= r < nrows:
                a0 = max(c_lo, 0)
                b0 = min(c_hi, ncols - 1)
                if b0 >= a0:
                    n_in += prefix[r, b0 + 1] - prefix[r, a0]
        inter[i] = n_in
        cover[i] = n_cov
    return inter, cover


@njit
def _score_overlap_numba(prefix, ox, oy, cs, cx, cy, cos_t, sin_t, half_len, half_wid):
    nrows = prefix.shape[0]
    ncols = prefix.shape[1] - 1
    m = cx.shape[0]
    inter = np.zeros(m, np.int64)
    cover = np.zeros(m, np.int64)
    vx = np.empty(4)
    vy = np.empty(4)
    for i in range(m):
        c = cos_t[i]
        s = sin_t[i]
        hl = half_len[i]
        hw = half_wid[i]
        k = 0
        for a in (-1.0, 1.0):
            for b in (-1.0, 1.0):
                vx[k] = cx[i] + a * hl * c - b * hw * s
                vy[k] = cy[i] + a * hl * s + b * hw * c
                k += 1
        ymin = vy.min()
        ymax = vy.max()
        r_lo = int(np.floor((ymin - oy) / cs + _OVERLAP_EPS))
        r_hi = int(np.ceil((ymax - oy) / cs - _OVERLAP_EPS)) - 1
        n_in = 0
        n_cov = 0
        for r in range(r_lo, r_hi + 1):
            ya = max(oy + r * cs, ymin)
            yb = min(oy + (r + 1) * cs, ymax)
            if yb - ya <= _OVERLAP_EPS:
                continue
            xmin = np.inf
            xmax = -np.inf
            lo, hi = _line_span(ya - cy[i], c, s, hl, hw)
            if lo <= hi:
                xmin = min(xmin, cx[i] + lo)
                xmax = max(xmax, cx[i] + hi)
            lo, hi = _line_span(yb - cy[i], c, s, hl, hw)
            if lo <= hi:
                xmin = min(xmin, cx[i] + lo)
                xmax = max(xmax, cx[i] + hi)
            for q in range(4):
                if ya < vy[q] < yb:
                    xmin = min(xmin, vx[q])
                    xmax = max(xmax, vx[q])
            if not xmax - xmin > _OVERLAP_EPS:
                continue
            c_lo = int(np.floor((xmin - ox) / cs + _OVERLAP_EPS))
            c_hi = int(np.ceil((xmax - ox) / cs - _OVERLAP_EPS)) - 1
            if c_hi < c_lo:
                continue
            n_cov += c_hi - c_lo + 1
            if 0 <= r < nrows:
                a0 = max(c_lo, 0)
                b0 = min(c_hi, ncols - 1)
                if b0 >= a0:
                    n_in += prefix[r, b0 + 1] - prefix[r, a0]
        inter[i] = n_in
        cover[i] = n_cov
    return inter, cover


def _line_span_numpy(dy, c, s, hl, hw):
    lo = np.full(dy.shape, -np.inf)
    hi = np.full(dy.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        use_c = np.abs(c) > _AXIS_EPS
        a = (-hl - dy * s) / c
        b = (hl - dy * s) / c
        lo = np.where(use_c, np.maximum(lo, np.minimum(a, b)), lo)
        hi = np.where(use_c, np.minimum(hi, np.maximum(a, b)), hi)
        miss = ~use_c & (np.abs(dy * s) > hl)
        use_s = np.abs(s) > _AXIS_EPS
        a = (-hw - dy * c) / -s
        b = (hw - dy * c) / -s
        lo = np.where(use_s, np.maximum(lo, np.minimum(a, b)), lo)
        hi = np.where(use_s, np.minimum(hi, np.maximum(a, b)), hi)
        miss |= ~use_s & (np.abs(dy * c) > hw)
    lo = np.where(miss, np.inf, lo)
    hi = np.where(miss, -np.inf, hi)
    return lo, hi


def _accumulate(prefix, r, row_ok, c_lo, c_hi):
    """Per-candidate (intersection, coverage) from per-row column runs."""
    nrows = prefix.shape[0]
    ncols = prefix.shape[1] - 1
    c_lo = np.where(row_ok, c_lo, 0).astype(np.int64)
    c_hi = np.where(row_ok, c_hi, -1).astype(np.int64)
    row_ok = row_ok & (c_hi >= c_lo)
    cover = np.where(row_ok, c_hi - c_lo + 1, 0).sum(axis=1)
    a0 = np.maximum(c_lo, 0)
    b0 = np.minimum(c_hi, ncols - 1)
    in_grid = row_ok & (r >= 0) & (r < nrows) & (b0 >= a0)
    rr = np.where(in_grid, r, 0)
    a0 = np.where(in_grid, a0, 0)
    b0 = np.where(in_grid, b0, -1)
    vals = prefix[rr, b0 + 1] - prefix[rr, a0]
    return np.where(in_grid, vals, 0).sum(axis=1), cover


def _score_center_numpy(prefix, ox, oy, cs, cx, cy, cos_t, sin_t, half_len, half_wid):
    m = cx.shape[0]
    inter = np.zeros(m, np.int64)
    cover = np.zeros(m, np.int64)
    for lo_i in range(0, m, _NUMPY_RECT_CHUNK):
        sl = slice(lo_i, min(m, lo_i + _NUMPY_RECT_CHUNK))
        c, s, hl, hw, x0, y0 = (a[sl][:, None] for a in (cos_t, sin_t, half_len, half_wid, cx, cy))
        ey = hl * np.abs(s) + hw * np.abs(c)
        r_lo = np.ceil((y0 - ey - oy) / cs - 0.5).astype(np.int64)
        r_hi = np.floor((y0 + ey - oy) / cs - 0.5).astype(np.int64)
        span = int((r_hi - r_lo).max()) + 1
        if span <= 0:
            continue
        r = r_lo + np.arange(span)[None, :]
        dy = oy + (r + 0.5) * cs - y0
        lo, hi = _line_span_numpy(dy, c, s, hl, hw)
        row_ok = (r <= r_hi) & ~(lo > hi)
        with np.errstate(invalid="ignore"):
            c_lo = np.ceil((x0 + lo - ox) / cs - 0.5)
            c_hi = np.floor((x0 + hi - ox) / cs - 0.5)
        inter[sl], cover[sl] = _accumulate(prefix, r, row_ok, c_lo, c_hi)
    return inter, cover


def _score_overlap_numpy(prefix, ox, oy, cs, cx, cy, cos_t, sin_t, half_len, half_wid):
    m = cx.shape[0]
    inter = np.zeros(m, np.int64)
    cover = np.zeros(m, np.int64)
    for lo_i in range(0, m, _NUMPY_RECT_CHUNK):
        sl = slice(lo_i, min(m, lo_i + _NUMPY_RECT_CHUNK))
        c, s, hl, hw, x0, y0 = (a[sl][:, None] for a in (cos_t, sin_t, half_len, half_wid, cx, cy))
        vx = np.concatenate([x0 + a * hl * c - b * hw * s for a in (-1.0, 1.0) for b in (-1.0, 1.0)], axis=1)
        vy = np.concatenate([y0 + a * hl * s + b * hw * c for a in (-1.0, 1.0) for b in (-1.0, 1.0)], axis=1)
        ymin = vy.min(axis=1, keepdims=True)
        ymax = vy.max(axis=1, keepdims=True)
        r_lo = np.floor((ymin - oy) / cs + _OVERLAP_EPS).astype(np.int64)
        r_hi = np.ceil((ymax - oy) / cs - _OVERLAP_EPS).astype(np.int64) - 1
        span = int((r_hi - r_lo).max()) + 1
        if span <= 0:
            continue
        r = r_lo + np.arange(span)[None, :]
        ya = np.maximum(oy + r * cs, ymin)
        yb = np.minimum(oy + (r + 1) * cs, ymax)
        row_ok = (r <= r_hi) & ~(yb - ya <= _OVERLAP_EPS)
        xmin = np.full(r.shape, np.inf)
        xmax = np.full(r.shape, -np.inf)
        for y in (ya, yb):
            lo, hi = _line_span_numpy(y - y0, c, s, hl, hw)
            hit = lo <= hi
            xmin = np.where(hit, np.minimum(xmin, x0 + lo), xmin)
            xmax = np.where(hit, np.maximum(xmax, x0 + hi), xmax)
        for q in range(4):
            inside = (ya < vy[:, q:q + 1]) & (vy[:, q:q + 1] < yb)
            xmin = np.where(inside, np.minimum(xmin, vx[:, q:q + 1]), xmin)
            xmax = np.where(inside, np.maximum(xmax, vx[:, q:q + 1]), xmax)
        with np.errstate(invalid="ignore"):
            row_ok &= xmax - xmin > _OVERLAP_EPS
            c_lo = np.floor((xmin - ox) / cs + _OVERLAP_EPS)
            c_hi = np.ceil((xmax - ox) / cs - _OVERLAP_EPS) - 1
        inter[sl], cover[sl] = _accumulate(prefix, r, row_ok, c_lo, c_hi)
    return inter, cover


_RECT_KERNELS = {
    ("numba", "overlap"): _score_overlap_numba,
    ("numba", "center"): _score_center_numba,
    ("numpy", "overlap"): _score_overlap_numpy,
    ("numpy", "center"): _score_center_numpy,
}


def score_rects(prefix, origin, cell, cx, cy, cos_t, sin_t, half_len, half_wid, coverage="overlap"):
    """Cell-overlap counts of many rectangles against an occupancy grid.

    ``prefix`` is the row-wise inclusive prefix sum of the occupancy with a
    leading zero column. Returns ``(intersection, coverage)`` cell counts per
    rectangle, where coverage counts covered cells anywhere on the lattice.
    """
    if coverage not in ("overlap", "center"):
        raise ValueError(f"unknown coverage rule {coverage!r}")
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (cx, cy, cos_t, sin_t, half_len, half_wid)]
    prefix = np.ascontiguousarray(prefix, dtype=np.int64)
    fn = _RECT_KERNELS[(_accel.backend(), coverage)]
    return fn(prefix, float(origin[0]), float(origin[1]), float(cell), *args)
