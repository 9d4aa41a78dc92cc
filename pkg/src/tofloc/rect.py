"""Oriented rectangle on the ground plane."""

import math
from dataclasses import dataclass

import numpy as np


def normalize_angle(theta):
    """Wrap an orientation into [0, pi); rectangles are symmetric under +pi."""
    t = math.fmod(theta, math.pi)
    if t < 0:
        t += math.pi
    if t >= math.pi:
        t = 0.0
    return t


@dataclass(frozen=True)
class RectModel:
    """Rectangle with center ``(cx, cy)``; ``theta`` is the direction of its long side.

    ``width <= length`` is enforced by swapping and rotating by 90 degrees.
    """

    cx: float
    cy: float
    theta: float
    width: float
    length: float

    def __post_init__(self):
        w, l, t = float(self.width), float(self.length), float(self.theta)
        if not (w > 0 and l > 0) or not all(map(math.isfinite, (w, l, t, self.cx, self.cy))):
            raise ValueError(f"invalid rectangle {self!r}")
        if w > l:
            w, l = l, w
            t += math.pi / 2
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "length", l)
        object.__setattr__(self, "theta", normalize_angle(t))

    @property
    def theta_deg(self):
        return math.degrees(self.theta)

    @property
    def area(self):
        return self.width * self.length

    def axes(self):
        """Unit vectors along the length and the width."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([c, s]), np.array([-s, c])

    def corners(self):
        """Corners in counter-clockwise order, shape (4, 2)."""
        u, v = self.axes()
        hl, hw = self.length / 2, self.width / 2
        center = np.array([self.cx, self.cy])
        return np.array([
            center - hl * u - hw * v,
            center + hl * u - hw * v,
            center + hl * u + hw * v,
            center - hl * u + hw * v,
        ])

    def contains(self, pts):
        """Boolean mask of 2D points inside (boundary included)."""
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = pts[..., 0] - self.cx
        dy = pts[..., 1] - self.cy
        along = dx * c + dy * s
        across = -dx * s + dy * c
        return (np.abs(along) <= self.length / 2) & (np.abs(across) <= self.width / 2)

    def to_dict(self):
        return {
            "cx": self.cx,
            "cy": self.cy,
            "theta_deg": self.theta_deg,
            "width_m": self.width,
            "length_m": self.length,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["cx"], d["cy"], math.radians(d["theta_deg"]), d["width_m"], d["length_m"])
