"""Axis-aligned box arithmetic.

Boxes are corner-form ``(xmin, ymin, xmax, ymax)`` in pixels with the origin
at the top-left of the image. Vectorised helpers accept ``(N, 4)`` arrays;
the scalar :class:`Box` type is what annotations and detections carry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_NMS_THRESHOLD = 0.45


class Box(NamedTuple):
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def is_valid(self) -> bool:
        return self.xmin <= self.xmax and self.ymin <= self.ymax

    def clip(self, width: float, height: float) -> "Box":
        return Box(
            min(max(self.xmin, 0.0), width),
            min(max(self.ymin, 0.0), height),
            min(max(self.xmax, 0.0), width),
            min(max(self.ymax, 0.0), height),
        )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class Detection:
    box: Box
    category: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-form boxes (0 for empty union)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(
        boxes[..., 3] - boxes[..., 1], 0, None
    )


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU, ``(N, 4) x (M, 4) -> (N, M)``."""
    b1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    b2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(b1[:, None, :2], b2[None, :, :2])
    rb = np.minimum(b1[:, None, 2:], b2[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(b1)[:, None] + box_area(b2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def wh_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two boxes given as ``(w, h)`` that share their top-left corner."""
    inter = min(a[0], b[0]) * min(a[1], b[1])
    union = a[0] * a[1] + b[0] * b[1] - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def wh_iou_matrix(wh1: np.ndarray, wh2: np.ndarray) -> np.ndarray:
    wh1 = np.asarray(wh1, dtype=np.float64).reshape(-1, 2)
    wh2 = np.asarray(wh2, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh1[:, None, :], wh2[None, :, :]).prod(axis=2)
    union = wh1.prod(axis=1)[:, None] + wh2.prod(axis=1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _nms_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(
        range(len(dets)),
        key=lambda i: (
            -dets[i].confidence,
            dets[i].category,
            dets[i].box.xmin,
            dets[i].box.ymin,
            i,
        ),
    )


def nms(
    dets: Iterable[Detection], iou_threshold: float = DEFAULT_NMS_THRESHOLD
) -> list[Detection]:
    """Greedy per-category non-maximum suppression.

    A detection is dropped when its IoU with an already kept detection of
    the same category exceeds ``iou_threshold``. The result is sorted by
    confidence, highest first.
    """
    dets = list(dets)
    if not dets:
        return []
    order = _nms_order(dets)
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    cats = np.array([dets[i].category for i in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for j in range(len(order)):
        if suppressed[j]:
            continue
        keep.append(order[j])
        same = cats == cats[j]
        suppressed |= same & (overlaps[j] > iou_threshold)
    return [dets[i] for i in keep]


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize into a ``target x target`` padded square.

    Padding is split with the floor on the top/left side.
    """

    scale: float
    pad_x: int
    pad_y: int
    source_w: int
    source_h: int
    target: int

    @property
    def resized_w(self) -> int:
        return int(round(self.source_w * self.scale))

    @property
    def resized_h(self) -> int:
        return int(round(self.source_h * self.scale))

    def apply(self, box: Sequence[float]) -> Box:
        s = self.scale
        return Box(
            box[0] * s + self.pad_x,
            box[1] * s + self.pad_y,
            box[2] * s + self.pad_x,
            box[3] * s + self.pad_y,
        )

    def invert(self, box: Sequence[float]) -> Box:
        s = self.scale
        return Box(
            (box[0] - self.pad_x) / s,
            (box[1] - self.pad_y) / s,
            (box[2] - self.pad_x) / s,
            (box[3] - self.pad_y) / s,
        )

    def apply_array(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        offset = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y], dtype=np.float64)
        return boxes * self.scale + offset

    def invert_array(self, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        offset = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y], dtype=np.float64)
        return (boxes - offset) / self.scale


def letterbox_transform(source_w: int, source_h: int, target: int) -> LetterboxTransform:
    if source_w <= 0 or source_h <= 0 or target <= 0:
        raise ValueError(
            f"letterbox dimensions must be positive, got {source_w}x{source_h} -> {target}"
        )
    scale = target / max(source_w, source_h)
    new_w = int(round(source_w * scale))
    new_h = int(round(source_h * scale))
    return LetterboxTransform(
        scale=scale,
        pad_x=(target - new_w) // 2,
        pad_y=(target - new_h) // 2,
        source_w=source_w,
        source_h=source_h,
        target=target,
    )


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, height)
    return boxes


def center_to_corner(cxcywh: np.ndarray) -> np.ndarray:
    c = np.asarray(cxcywh, dtype=np.float64)
    half = c[..., 2:4] / 2
    return np.concatenate([c[..., :2] - half, c[..., :2] + half], axis=-1)


def corner_to_center(xyxy: np.ndarray) -> np.ndarray:
    b = np.asarray(xyxy, dtype=np.float64)
    wh = b[..., 2:4] - b[..., :2]
    return np.concatenate([b[..., :2] + wh / 2, wh], axis=-1)


def is_close_box(a: Sequence[float], b: Sequence[float], tol: float = 1e-6) -> bool:
    return all(math.isclose(x, y, abs_tol=tol) for x, y in zip(a, b))
