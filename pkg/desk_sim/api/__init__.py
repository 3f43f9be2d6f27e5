from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .common import (
    CheckpointError,
    ConfigError,
    DatasetError,
    GeometryError,
    LossError,
    MaskError,
    NonFiniteError,
    OptimizerError,
    ShapeError,
    SimError,
    TapeError,
    error_record,
    json_line,
)


@dataclass(frozen=True)
class CropSpec:
    """
    Placement of one augmented view inside its raw image, in raw-image
    pixels. Both views of a pair are taken after the same horizontal flip
    has been applied to the raw image, so their coordinates share a frame.
    """

    top: float
    left: float
    height: float
    width: float
    flipped: bool = False

    def __post_init__(self):
        values = (self.top, self.left, self.height, self.width)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"Crop has non-finite placement: {values}")
        if self.height <= 0 or self.width <= 0:
            raise GeometryError(f"Crop has non-positive extent: {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise GeometryError(f"Crop origin ({self.top}, {self.left}) lies outside the image")

    def as_box(self) -> Tuple[float, float, float, float]:
        return (self.left, self.top, self.left + self.width, self.top + self.height)


@dataclass(frozen=True)
class GridSpec:
    n_h: int
    n_w: int

    def __post_init__(self):
        if self.n_h < 1 or self.n_w < 1:
            raise GeometryError(f"Invalid token grid: {self.n_h}x{self.n_w}")

    @property
    def n(self) -> int:
        return self.n_h * self.n_w


@dataclass(frozen=True)
class MaskPattern:
    """
    Visible token indices of the online view. Indices are sorted and
    unique; everything else is hidden from the online backbone.
    """

    visible_indices: Tuple[int, ...]
    total: int

    @property
    def visible_count(self) -> int:
        return len(self.visible_indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.visible_indices, dtype=np.int64)


@dataclass(frozen=True)
class ViewPair:
    """
    Two augmented views of one raw image. The mask applies to view a only,
    which feeds the online branch; view b feeds the target branch.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    crop_a: CropSpec
    crop_b: CropSpec
    mask: MaskPattern


@dataclass(frozen=True)
class ViewBatch:
    images_a: np.ndarray
    images_b: np.ndarray
    crops_a: Tuple[CropSpec, ...]
    crops_b: Tuple[CropSpec, ...]
    visible: np.ndarray
    shared_crop: bool = False

    @property
    def size(self) -> int:
        return int(self.images_a.shape[0])


@dataclass(frozen=True)
class LossReport:
    """
    Outcome of one objective evaluation. Terms with zero weight are not
    computed and are reported as None. ``objective`` holds the differentiable
    scalar the trainer back-propagates and is never serialized.
    """

    total: float
    global_term: Optional[float]
    dense_term: Optional[float]
    align: Optional[float]
    uniform: Optional[float]
    feat_std: float
    collapsed: bool = False
    objective: Any = field(default=None, repr=False, compare=False)

    def to_record(self) -> Dict[str, Any]:
        return {
            "total": self.total,
            "global": self.global_term,
            "dense": self.dense_term,
            "align": self.align,
            "uniform": self.uniform,
            "feat_std": self.feat_std,
        }


@dataclass(frozen=True)
class FeatureBank:
    features: np.ndarray
    labels: np.ndarray
    l2_normalized: bool

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"FeatureBank rows {self.features.shape[0]} != labels {self.labels.shape[0]}"
            )

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True)
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_index: Optional[Tuple[int, ...]]
    checked: int
    parameter: Optional[str] = None


__all__: Sequence[str] = [
    "CheckpointError",
    "ConfigError",
    "CropSpec",
    "DatasetError",
    "FeatureBank",
    "GeometryError",
    "GradCheckResult",
    "GridSpec",
    "LossError",
    "LossReport",
    "MaskError",
    "MaskPattern",
    "NonFiniteError",
    "OptimizerError",
    "ShapeError",
    "SimError",
    "TapeError",
    "ViewBatch",
    "ViewPair",
    "error_record",
    "json_line",
]
