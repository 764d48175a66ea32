"""Shared domain types and elementary box geometry."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box stored as center + extent, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_tlwh(cls, left: float, top: float, w: float, h: float) -> "BBox":
        return cls(left + w / 2.0, top + h / 2.0, w, h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    def tlwh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)


@dataclass(frozen=True)
class Detection:
    """One observed box with a distance reading.

    ``gt_id`` is only populated by the simulator and evaluation code; false
    positives carry ``None``.
    """

    bbox: BBox
    dist_mean: float
    dist_var: float
    confidence: float
    frame: int
    gt_id: Optional[int] = None

    def __post_init__(self):
        if not (self.dist_mean > 0 and math.isfinite(self.dist_mean)):
            raise ValueError(f"dist_mean must be positive, got {self.dist_mean}")
        if not (self.dist_var > 0 and math.isfinite(self.dist_var)):
            raise ValueError(f"dist_var must be positive, got {self.dist_var}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")
        if self.frame < 0:
            raise ValueError(f"negative frame index {self.frame}")

    def measurement(self) -> np.ndarray:
        """Kalman measurement vector [cx, cy, w, h, d]."""
        b = self.bbox
        return np.array([b.cx, b.cy, b.w, b.h, self.dist_mean], dtype=float)


@dataclass(frozen=True)
class FrameObservations:
    frame: int
    detections: tuple[Detection, ...] = field(default_factory=tuple)
    scene_id: str = ""

    def __post_init__(self):
        # accept any sequence, store immutably
        object.__setattr__(self, "detections", tuple(self.detections))
        for det in self.detections:
            if det.frame != self.frame:
                raise ValueError(
                    f"detection frame {det.frame} does not match frame {self.frame}"
                )


@dataclass(frozen=True)
class DeltaFeatures:
    """Signed residuals (prediction minus candidate). Pixels except dd (meters)."""

    dx: float
    dy: float
    dw: float
    dh: float
    dd: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite deltas {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.dx, self.dy, self.dw, self.dh, self.dd)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "DeltaFeatures":
        return cls(*(float(v) for v in arr))


def _intersection(a: tuple, b: tuple) -> Optional[tuple]:
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[2], b[2]), min(a[3], b[3])
    if x2 <= x1 or y2 <= y1:
        return None
    return (x1, y1, x2, y2)


def _corner_area(c: tuple) -> float:
    return (c[2] - c[0]) * (c[3] - c[1])


def iou(a: BBox, b: BBox) -> float:
    ca, cb = a.corners(), b.corners()
    inter = _intersection(ca, cb)
    if inter is None:
        return 0.0
    # all areas from corners, so iou(a, a) == 1 exactly
    ia = _corner_area(inter)
    return min(1.0, ia / (_corner_area(ca) + _corner_area(cb) - ia))


def iou_matrix(boxes_a: Sequence[BBox], boxes_b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([bx.corners() for bx in boxes_a])
    b = np.array([bx.corners() for bx in boxes_b])
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return np.minimum(1.0, inter / (area_a[:, None] + area_b[None, :] - inter))


def union_area(rects: Iterable[tuple]) -> float:
    """Exact area of a union of (x1, y1, x2, y2) rectangles via coordinate compression."""
    rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    ys = sorted({r[1] for r in rects} | {r[3] for r in rects})
    xi = {x: i for i, x in enumerate(xs)}
    yi = {y: i for i, y in enumerate(ys)}
    covered = np.zeros((len(xs) - 1, len(ys) - 1), dtype=bool)
    for x1, y1, x2, y2 in rects:
        covered[xi[x1]:xi[x2], yi[y1]:yi[y2]] = True
    widths = np.diff(xs)
    heights = np.diff(ys)
    return float(widths @ covered.astype(float) @ heights)


def occlusion_level(target: BBox, occluders: Sequence[BBox]) -> float:
    """Fraction of ``target`` covered by the union of ``occluders``."""
    tc = target.corners()
    pieces = []
    for occ in occluders:
        inter = _intersection(tc, occ.corners())
        if inter is not None:
            pieces.append(inter)
    level = union_area(pieces) / target.area
    return min(1.0, max(0.0, level))
