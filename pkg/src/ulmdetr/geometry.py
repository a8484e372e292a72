"""Box representations, conversions, IoU/GIoU and the box-loss primitive.

Two box flavours are used throughout the package:

* :class:`BBoxN` -- normalized ``(cx, cy, w, h)``, fractions of the frame size.
  This is what the model predicts and what the losses consume.
* :class:`BBoxA` -- absolute corners ``(x0, y0, x1, y1)`` in pixels, used for
  rasterization, COCO export and metrics.

Scalar helpers operate on the dataclasses; the ``*_array`` helpers are the
vectorized numpy equivalents used by the matcher and the evaluator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MIN_BOX_SIDE = 1e-4


@dataclass(frozen=True)
class BBoxN:
    """Normalized center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside the unit square")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h,
                self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)


@dataclass(frozen=True)
class BBoxA:
    """Absolute corner-format box in pixels."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"box must have x0 < x1 and y0 < y1, got {vals}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


def _check_frame_dims(frame_w, frame_h):
    if frame_w < 1 or frame_h < 1:
        raise ValueError(f"frame dimensions must be >= 1, got {frame_w}x{frame_h}")


def to_absolute(b: BBoxN, frame_w: float, frame_h: float) -> BBoxA:
    """Scale a normalized box to pixel corners."""
    _check_frame_dims(frame_w, frame_h)
    x0, y0, x1, y1 = b.corners()
    return BBoxA(x0 * frame_w, y0 * frame_h, x1 * frame_w, y1 * frame_h)


def to_normalized(b: BBoxA, frame_w: float, frame_h: float) -> BBoxN:
    """Inverse of :func:`to_absolute`."""
    _check_frame_dims(frame_w, frame_h)
    return BBoxN(
        0.5 * (b.x0 + b.x1) / frame_w,
        0.5 * (b.y0 + b.y1) / frame_h,
        (b.x1 - b.x0) / frame_w,
        (b.y1 - b.y0) / frame_h,
    )


def _as_corners(box) -> tuple[float, float, float, float]:
    if isinstance(box, BBoxA):
        return box.x0, box.y0, box.x1, box.y1
    if isinstance(box, BBoxN):
        return box.corners()
    x0, y0, x1, y1 = box
    return float(x0), float(y0), float(x1), float(y1)


def _overlap_terms(a, b):
    ax0, ay0, ax1, ay1 = _as_corners(a)
    bx0, by0, bx1, by1 = _as_corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, enclose


def iou(a: BBoxA, b: BBoxA) -> float:
    """Intersection over union of two corner boxes."""
    inter, union, _ = _overlap_terms(a, b)
    return inter / union


def giou(a: BBoxA, b: BBoxA) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    inter, union, enclose = _overlap_terms(a, b)
    return inter / union - (enclose - union) / enclose


def box_loss(gt: BBoxN, pred: BBoxN, lambda_l1: float = 5.0, lambda_giou: float = 2.0) -> float:
    """Weighted L1 (over the 4 normalized coordinates) plus weighted ``1 - GIoU``."""
    if lambda_l1 < 0 or lambda_giou < 0:
        raise ValueError("loss weights must be non-negative")
    l1 = float(np.abs(gt.as_array() - pred.as_array()).sum())
    return lambda_l1 * l1 + lambda_giou * (1.0 - giou(gt, pred))


# --- vectorized helpers -----------------------------------------------------

def clamp_cxcywh(boxes: np.ndarray, min_side: float = MIN_BOX_SIDE) -> np.ndarray:
    """Clamp box sides from below so GIoU stays defined for degenerate predictions."""
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 2:] = np.maximum(out[..., 2:], min_side)
    return out


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x0, y0, x1, y1 = np.moveaxis(boxes, -1, 0)
    return np.stack([0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0], axis=-1)


def pairwise_iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``a`` (n, 4) and ``b`` (m, 4) corner boxes."""
    inter, union, _ = _pairwise_terms(a, b)
    return inter / union


def pairwise_giou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix between ``a`` (n, 4) and ``b`` (m, 4) corner boxes."""
    inter, union, enclose = _pairwise_terms(a, b)
    return inter / union - (enclose - union) / enclose


def _pairwise_terms(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    lt_c = np.minimum(a[:, None, :2], b[None, :, :2])
    rb_c = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh_c = rb_c - lt_c
    enclose = wh_c[..., 0] * wh_c[..., 1]
    return inter, union, enclose
