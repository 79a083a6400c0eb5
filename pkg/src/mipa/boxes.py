"""Box containers and geometry in normalized ``(cx, cy, w, h)`` coordinates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1, class_id=0, score=None) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, class_id, score)

    def xyxy(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class DetectionSet:
    boxes: list = field(default_factory=list)
    image_id: object = None

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    @property
    def is_prediction(self) -> bool:
        return bool(self.boxes) and all(b.score is not None for b in self.boxes)

    def validate(self, num_classes: int, prediction: bool):
        for b in self.boxes:
            if b.class_id >= num_classes:
                raise ValueError(f"class_id {b.class_id} >= num_classes {num_classes}")
            if (b.score is not None) != prediction:
                raise ValueError("scores must be present exactly on prediction sets")

    def of_class(self, class_id: int) -> list:
        return [b for b in self.boxes if b.class_id == class_id]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # areas from the same extents as the intersection so identical boxes give exactly 1
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` cxcywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    a0, a1 = a[:, None, :2] - a[:, None, 2:] / 2, a[:, None, :2] + a[:, None, 2:] / 2
    b0, b1 = b[None, :, :2] - b[None, :, 2:] / 2, b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.prod(a1 - a0, axis=-1)
    area_b = np.prod(b1 - b0, axis=-1)
    union = area_a + area_b - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float = 0.5) -> list:
    """Greedy non-maximum suppression; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return []
    overlaps = iou_matrix(boxes, boxes)
    keep = []
    for idx in order:
        if all(overlaps[idx, k] <= iou_threshold for k in keep):
            keep.append(int(idx))
    return keep
