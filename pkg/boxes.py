"""Box value types shared by alignment, detector and evalkit.

All boxes are center form (cx, cy, w, h) in pixels of whatever frame the
caller works in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Tuple

import numpy as np

from errors import ValidationError


@dataclass(frozen=True)
class GroundTruthBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValidationError(f"non-finite box {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box needs positive size, got w={self.w}, h={self.h}")

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return to_corners(self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float, class_id: int = 0) -> 'GroundTruthBox':
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0, class_id)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)


@dataclass(frozen=True)
class Detection:
    """A scored box. score = objectness x max(class_probs)."""
    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_probs: Tuple[float, ...] = (1.0,)
    score: float = field(default=-1.0)

    def __post_init__(self):
        object.__setattr__(self, 'class_probs', tuple(float(p) for p in self.class_probs))
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"detection needs positive size, got w={self.w}, h={self.h}")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValidationError(f"objectness outside [0,1]: {self.objectness}")
        if not self.class_probs or any(not 0.0 <= p <= 1.0 for p in self.class_probs):
            raise ValidationError(f"class probabilities outside [0,1]: {self.class_probs}")
        if self.score < 0:
            object.__setattr__(self, 'score', float(self.objectness * max(self.class_probs)))
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score outside [0,1]: {self.score}")

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        return to_corners(self.cx, self.cy, self.w, self.h)

    @classmethod
    def scored(cls, cx: float, cy: float, w: float, h: float, score: float) -> 'Detection':
        """Single-class detection where only the final score is known."""
        return cls(cx, cy, w, h, objectness=score, class_probs=(1.0,), score=score)

    def moved(self, cx: float, cy: float, w: float, h: float) -> 'Detection':
        return replace(self, cx=cx, cy=cy, w=w, h=h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)


def to_corners(cx: float, cy: float, w: float, h: float) -> Tuple[float, float, float, float]:
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def iou(a, b) -> float:
    """Intersection over union of two center-form boxes."""
    ax0, ay0, ax1, ay1 = to_corners(a.cx, a.cy, a.w, a.h)
    bx0, by0, bx1, by1 = to_corners(b.cx, b.cy, b.w, b.h)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def ciou(a, b) -> float:
    """Complete IoU: IoU - rho^2/c^2 - alpha*v."""
    value = iou(a, b)
    ax0, ay0, ax1, ay1 = to_corners(a.cx, a.cy, a.w, a.h)
    bx0, by0, bx1, by1 = to_corners(b.cx, b.cy, b.w, b.h)
    cw = max(ax1, bx1) - min(ax0, bx0)
    ch = max(ay1, by1) - min(ay0, by0)
    c2 = cw * cw + ch * ch
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    v = (4.0 / math.pi ** 2) * (math.atan(b.w / b.h) - math.atan(a.w / a.h)) ** 2
    alpha = v / (1.0 - value + v) if v > 0 else 0.0
    return value - rho2 / c2 - alpha * v


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N,4) and (M,4) center-form arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(union > 0, inter / union, 0.0)


def boxes_to_array(boxes: Iterable) -> np.ndarray:
    arr = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=float)
    return arr.reshape(-1, 4)
