"""Axis-aligned rectangle arithmetic: IoU, generalized IoU, and the GIoU loss.

Boxes use corner form (x1, y1, x2, y2) with area = (x2-x1)*(y2-y1); the module
is unit-agnostic. Zero-area boxes are legal inputs and any overlap involving
one is scored 0, so every operation here is total on valid boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = ["BBox", "iou", "giou", "giou_loss", "iou_matrix", "giou_matrix",
           "iou_pairwise", "giou_pairwise"]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle; x2 >= x1 and y2 >= y1, all coordinates finite."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ValidationError("coordinate must be a real number", field=name)
            if not math.isfinite(v):
                raise ValidationError("coordinate must be finite", field=name)
        if self.x2 < self.x1:
            raise ValidationError("x2 < x1 (negative extent)", field="x2")
        if self.y2 < self.y1:
            raise ValidationError("y2 < y1 (negative extent)", field="y2")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: iou minus the enclosing-hull penalty, in [-1, 1].

    A degenerate hull (zero area) carries no penalty, so the value stays
    defined for point-like inputs.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    base = inter / union if union > 0.0 else 0.0
    if hull <= 0.0:
        return base
    return base - (hull - union) / hull


def giou_loss(a: BBox, b: BBox) -> float:
    """1 - giou, in [0, 2]. The pairwise matching cost."""
    return 1.0 - giou(a, b)


def _areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for (N,4) and (M,4) corner-form arrays; unchecked fast path."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU for (N,4) and (M,4) arrays; unchecked fast path."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = _areas(a)[:, None] + _areas(b)[None, :] - inter
    hull_lt = np.minimum(a[:, None, :2], b[None, :, :2])
    hull_rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull_wh = hull_rb - hull_lt
    hull = hull_wh[:, :, 0] * hull_wh[:, :, 1]
    base = np.zeros_like(inter)
    np.divide(inter, union, out=base, where=union > 0.0)
    penalty = np.zeros_like(inter)
    np.divide(hull - union, hull, out=penalty, where=hull > 0.0)
    return base - penalty


def iou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise IoU of matched rows: (N,4) against (N,4); unchecked fast path."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = _areas(a) + _areas(b) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def giou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element-wise generalized IoU of matched rows; unchecked fast path."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = _areas(a) + _areas(b) - inter
    hull_wh = np.maximum(a[:, 2:], b[:, 2:]) - np.minimum(a[:, :2], b[:, :2])
    hull = hull_wh[:, 0] * hull_wh[:, 1]
    base = np.zeros_like(inter)
    np.divide(inter, union, out=base, where=union > 0.0)
    penalty = np.zeros_like(inter)
    np.divide(hull - union, hull, out=penalty, where=hull > 0.0)
    return base - penalty
