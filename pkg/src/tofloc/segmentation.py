"""Floor and object masks: externally produced files or classical baselines.

Baselines:

* ``floor_ransac`` takes the winning plane of RANSAC over every valid
  point. It finds the floor only when the floor dominates the view.
* ``object_heightband`` keeps pixels whose height above the floor lies in a
  band, then the largest 4-connected component. Heights are floor-relative,
  so the result does not depend on how high the camera is mounted.
"""

import enum
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .calibration import RansacParams, ransac_plane
from .frame_io import MaskClass, SegMask, load_mask

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class SegMode(str, enum.Enum):
    EXTERNAL_FILE = "external_file"
    FLOOR_RANSAC = "floor_ransac"
    OBJECT_HEIGHTBAND = "object_heightband"

    @classmethod
    def parse(cls, value):
        """Accept enum values plus the CLI spellings ``external``, ``floor-ransac``, ``heightband``."""
        aliases = {"external": cls.EXTERNAL_FILE, "floor-ransac": cls.FLOOR_RANSAC,
                   "heightband": cls.OBJECT_HEIGHTBAND}
        if isinstance(value, cls):
            return value
        return aliases.get(value) or cls(str(value).replace("-", "_"))


@dataclass
class SegmenterConfig:
    mode: SegMode = SegMode.OBJECT_HEIGHTBAND
    path: Optional[str] = None
    class_tag: MaskClass = MaskClass.OBJECT
    h_min: float = 0.3
    h_max: float = 0.9
    min_component_px: int = 20
    ransac: Optional[RansacParams] = None

    def __post_init__(self):
        self.mode = SegMode.parse(self.mode)
        self.class_tag = MaskClass(self.class_tag)
        if not 0 <= self.h_min < self.h_max:
            raise ValueError(f"height band must satisfy 0 <= h_min < h_max, got [{self.h_min}, {self.h_max}]")
        if self.min_component_px < 1:
            raise ValueError("min_component_px must be >= 1")


def segment_floor_ransac(cloud, params=None):
    """Inlier pixels of the dominant plane. Raises ConsensusError if none qualifies."""
    pts, flat = cloud.valid_points()
    plane = ransac_plane(pts, params)
    label = np.zeros(cloud.valid.size, bool)
    label[flat[plane.inliers]] = True
    return SegMask(label.reshape(cloud.shape), MaskClass.FLOOR)


def largest_component(mask, min_size=1):
    """Largest 4-connected component of ``mask`` with at least ``min_size`` pixels.

    Equal sizes go to the component whose first pixel comes first in
    row-major order.
    """
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros(mask.shape, bool)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    best = int(np.argmax(sizes))
    if sizes[best] < min_size:
        return np.zeros(mask.shape, bool)
    return labels == best


def segment_object_heightband(height_map, band=(0.3, 0.9), min_component_px=20):
    """Pixels with floor height in ``[h_min, h_max]``, largest component only.

    An empty mask is a valid result.
    """
    h_min, h_max = band
    if not 0 <= h_min < h_max:
        raise ValueError(f"height band must satisfy 0 <= h_min < h_max, got {band}")
    h = height_map.heights
    with np.errstate(invalid="ignore"):
        inband = np.isfinite(h) & (h >= h_min) & (h <= h_max)
    return SegMask(largest_component(inband, min_component_px), MaskClass.OBJECT)


def segment(frame, cloud=None, height_map=None, config=None):
    """Produce a mask according to ``config``.

    ``external_file`` needs only the frame (for its size); ``floor_ransac``
    needs ``cloud``; ``object_heightband`` needs ``height_map``.
    """
    config = config or SegmenterConfig()
    if config.mode == SegMode.EXTERNAL_FILE:
        if not config.path:
            raise ValueError("external_file mode needs a mask path")
        if not os.path.exists(config.path):
            raise FileNotFoundError(f"mask file not found: {config.path}")
        return load_mask(config.path, config.class_tag, frame.depth.shape if frame is not None else None)
    if config.mode == SegMode.FLOOR_RANSAC:
        if cloud is None:
            raise ValueError("floor_ransac mode needs a point cloud")
        return segment_floor_ransac(cloud, config.ransac)
    if height_map is None:
        raise ValueError("object_heightband mode needs a height map (calibrate first)")
    return segment_object_heightband(height_map, (config.h_min, config.h_max), config.min_component_px)
