"""Ground-calibrated object localization for time-of-flight depth frames.

Floor calibration turns a ToF frame into a camera-independent ground frame;
the object's footprint is then rasterized on the floor and fitted with a
standard-size rectangle whose raster IoU serves as a confidence score.
"""

__version__ = "0.1.0"

from ._accel import backend, set_backend, using_backend
from .calibration import (Calibration, GroundPlane, GroundTransform, HeightMap, RansacParams,
                          build_ground_transform, calibrate, compute_height_map, fit_plane_svd, ransac_plane,
                          transform_normals)
from .config import PipelineConfig
from .errors import ConsensusError, DegenerateError, FormatError, PipelineError, ToflocError
from .frame_io import (GroundTruth, Intrinsics, MaskClass, SegMask, ToFFrame, load_frame, load_ground_truth,
                       load_mask, save_frame, save_mask)
from .localization import (LocalizationResult, RasterGrid, SearchRanges, gate, grid_search, init_rect, localize,
                           project_to_ground, raster_iou, rasterize)
from .metrics import EvalRecord, ap_at, auc_at, box_iou, normal_angle_error, pixel_iou, rect_to_frame
from .pipeline import evaluate_batch, run_pipeline
from .pointcloud import NormalMap, PointCloud, SpatialIndex, backproject, estimate_normals, radius_knn
from .rect import RectModel
from .segmentation import SegmenterConfig, segment, segment_floor_ransac, segment_object_heightband

__all__ = [name for name in dir() if not name.startswith("_")]
