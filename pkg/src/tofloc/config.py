"""Pipeline configuration with a JSON round trip.

Every block mirrors the keyword arguments of the module it feeds. Loading
rejects unknown keys at every level, so a typo fails loudly instead of
silently falling back to a default.
"""

import json
from dataclasses import dataclass, field, fields, is_dataclass

from .calibration import RansacParams
from .localization import COVERAGE_RULES, DEFAULT_CELL, DEFAULT_SHAPES, DEFAULT_THRESHOLD, SearchRanges
from .segmentation import SegMode

SCHEMA_VERSION = 1


@dataclass
class FloorBlock:
    mode: str = "external_file"
    path: str = ""

    def __post_init__(self):
        if SegMode.parse(self.mode) not in (SegMode.EXTERNAL_FILE, SegMode.FLOOR_RANSAC):
            raise ValueError(f"floor mode must be external_file or floor_ransac, got {self.mode!r}")
        self.mode = SegMode.parse(self.mode).value


@dataclass
class ObjectBlock:
    mode: str = "external_file"
    path: str = ""
    h_min: float = 0.3
    h_max: float = 0.9
    min_component_px: int = 20

    def __post_init__(self):
        if SegMode.parse(self.mode) not in (SegMode.EXTERNAL_FILE, SegMode.OBJECT_HEIGHTBAND):
            raise ValueError(f"object mode must be external_file or object_heightband, got {self.mode!r}")
        self.mode = SegMode.parse(self.mode).value
        if not 0 <= self.h_min < self.h_max:
            raise ValueError("height band must satisfy 0 <= h_min < h_max")


@dataclass
class NormalsBlock:
    enabled: bool = False
    radius: float = 0.10
    k: int = 10
    min_neighbors: int = 3


@dataclass
class RasterBlock:
    cell_size: float = DEFAULT_CELL
    min_points_per_cell: int = 1
    coverage: str = "overlap"

    def __post_init__(self):
        if self.coverage not in COVERAGE_RULES:
            raise ValueError(f"coverage must be one of {COVERAGE_RULES}")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")


@dataclass
class GateBlock:
    threshold: float = DEFAULT_THRESHOLD


@dataclass
class EvalBlock:
    iou_threshold: float = 0.7


def _default_shapes():
    return [list(s) for s in DEFAULT_SHAPES]


@dataclass
class PipelineConfig:
    floor: FloorBlock = field(default_factory=FloorBlock)
    object: ObjectBlock = field(default_factory=ObjectBlock)
    ransac: RansacParams = field(default_factory=RansacParams)
    normals: NormalsBlock = field(default_factory=NormalsBlock)
    raster: RasterBlock = field(default_factory=RasterBlock)
    search: SearchRanges = field(default_factory=SearchRanges)
    gate: GateBlock = field(default_factory=GateBlock)
    shapes: list = field(default_factory=_default_shapes)
    eval: EvalBlock = field(default_factory=EvalBlock)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.shapes = [[float(w), float(l)] for w, l in self.shapes]
        if not self.shapes or any(not (w > 0 and l > 0) for w, l in self.shapes):
            raise ValueError("shapes must be a non-empty list of positive [width, length] pairs")
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"config schema {self.schema_version} is not supported (expected {SCHEMA_VERSION})")

    @property
    def shape_tuples(self):
        return tuple(tuple(s) for s in self.shapes)

    def to_dict(self):
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d):
        return _from_plain(cls, d, "config")

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides such as ``{"ransac.seed": 7}``; ``None`` values are skipped."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[leaf] = value
        return PipelineConfig.from_dict(d)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, d, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _from_plain(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
