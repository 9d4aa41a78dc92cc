"""Evaluation metrics: segmentation overlap, calibration angle, box overlap,
and the detection scores AP@t and AUC@t.

With one object and one prediction per frame, AP@t is the fraction of
frames whose box IoU reaches ``t``. AUC@t is the ROC area of the confidence
ranking (positives: box IoU >= t) scaled by AP@t, so a perfect ranking gives
AUC@t == AP@t and any mis-ordered pair pulls it below. Both definitions are
reconstructions; see the README.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .calibration import GroundTransform
from .rect import RectModel

_UNIT_TOL = 1e-6


def _as_bool(mask):
    return np.asarray(getattr(mask, "label", mask), dtype=bool)


def pixel_iou(gt, pred):
    """``(iou, precision, recall)`` of ``pred`` against ``gt``.

    Accepts :class:`~tofloc.frame_io.SegMask` or boolean arrays. Empty
    conventions: two empty masks have IoU 1; precision (recall) is 1 when
    nothing was predicted (nothing is true) and the other mask is empty too,
    otherwise 0.
    """
    g = _as_bool(gt)
    p = _as_bool(pred)
    if g.shape != p.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {p.shape}")
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    union = tp + fp + fn
    iou = tp / union if union else 1.0
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if tp + fn == 0 else 0.0
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if tp + fp == 0 else 0.0
    return iou, precision, recall


def normal_angle_error(pred_normal, gt_normal):
    """Unsigned angle between two unit normals, in degrees within [0, 90]."""
    a = np.asarray(pred_normal, dtype=np.float64).reshape(3)
    b = np.asarray(gt_normal, dtype=np.float64).reshape(3)
    for v in (a, b):
        if not np.all(np.isfinite(v)) or abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
            raise ValueError(f"not a unit vector: {v}")
    # atan2 of |cross| and |dot| stays accurate near 0 and 90 degrees
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), abs(float(a @ b))))


def polygon_area(poly):
    """Shoelace area of a simple polygon given as (N, 2) vertices."""
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_convex(subject, clip):
    """Sutherland-Hodgman: ``subject`` polygon clipped by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    for i in range(len(clip)):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        src, out = out, []
        for j in range(len(src)):
            p, q = src[j - 1], src[j]
            sp, sq = side(p), side(q)
            if sq >= 0:
                if sp < 0:
                    t = sp / (sp - sq)
                    out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
                out.append(q)
            elif sp >= 0:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def box_iou(pred, gt):
    """Exact IoU of two oriented rectangles in the same frame."""
    if pred.area <= 0 or gt.area <= 0:
        raise ValueError("zero-area rectangle")
    inter = polygon_area(clip_convex(pred.corners(), gt.corners()))
    union = pred.area + gt.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def rect_to_frame(rect, src, dst):
    """Re-express a floor rectangle from ground frame ``src`` in ground frame ``dst``.

    Both are :class:`~tofloc.calibration.GroundTransform`; the rectangle is
    lifted to 3D at z = 0 of ``src``, taken back to the camera and then into
    ``dst``, where it is projected onto ``dst``'s floor.
    """
    if not isinstance(src, GroundTransform) or not isinstance(dst, GroundTransform):
        raise TypeError("expected GroundTransform instances")
    center = dst.apply(src.apply_inverse(np.array([rect.cx, rect.cy, 0.0])))
    u = dst.rotate(src.rotation.T @ np.array([math.cos(rect.theta), math.sin(rect.theta), 0.0]))
    return RectModel(center[0], center[1], math.atan2(u[1], u[0]), rect.width, rect.length)


@dataclass
class EvalRecord:
    frame_id: str
    seg_iou: float = float("nan")
    seg_precision: float = float("nan")
    seg_recall: float = float("nan")
    angle_error_deg: float = float("nan")
    box_iou: float = 0.0
    confidence: float = 0.0
    accepted: bool = False

    def __post_init__(self):
        for name in ("seg_iou", "seg_precision", "seg_recall", "box_iou", "confidence"):
            v = getattr(self, name)
            if not math.isnan(v) and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not math.isnan(self.angle_error_deg) and not 0.0 <= self.angle_error_deg <= 90.0:
            raise ValueError(f"angle_error_deg={self.angle_error_deg} outside [0, 90]")

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)


def _box_ious(records):
    if len(records) == 0:
        raise ValueError("empty record set")
    return np.array([r.box_iou for r in records], dtype=np.float64)


def ap_at(records, iou_threshold=0.7):
    """Fraction of frames whose box IoU reaches ``iou_threshold``."""
    return float(np.mean(_box_ious(records) >= iou_threshold))


@dataclass
class AucReport:
    auc: float
    ap: float
    roc_auc: float
    degenerate: bool
    curve: np.ndarray  # (K, 3): threshold, false-positive rate, true-positive rate


def roc_curve(labels, scores):
    """Operating points of a descending confidence sweep.

    Equal scores enter together, so ties yield diagonal segments. Rows are
    ``(threshold, fpr, tpr)``, starting at ``(inf, 0, 0)``.
    """
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1] if s.size else np.zeros(0, np.int64)
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    pos, neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    return np.r_[[[np.inf, 0.0, 0.0]], np.c_[s[last], fp / neg, tp / pos]]


def auc_report(records, iou_threshold=0.7):
    ious = _box_ious(records)
    labels = ious >= iou_threshold
    scores = np.array([r.confidence for r in records], dtype=np.float64)
    ap = float(labels.mean())
    curve = roc_curve(labels, scores)
    if labels.all() or not labels.any():
        return AucReport(ap, ap, float("nan"), True, curve)
    fpr, tpr = curve[:, 1], curve[:, 2]
    roc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return AucReport(roc * ap, ap, roc, False, curve)


def auc_at(records, iou_threshold=0.7):
    """AUC@t: ROC area of the confidence ranking, scaled so a perfect ranking gives AP@t."""
    return auc_report(records, iou_threshold).auc
