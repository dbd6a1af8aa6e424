"""Grid decoding, target assignment and the composite detection loss.

Raw head outputs are ``(N, H, W, 3, 5 + C)`` arrays holding
``(tx, ty, tw, th, to, class logits...)`` per cell and anchor slot. Level 0
is stride 8, level 1 stride 16, level 2 stride 32; level ``l`` uses anchor
group ``l`` of the :class:`~sddkit.anchors.AnchorSet`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .anchors import LEVEL_STRIDES, AnchorSet
from .geometry import DEFAULT_NMS_THRESHOLD, Box, Detection, iou_matrix, nms, wh_iou_matrix
from .nn.functional import sigmoid, softmax
from .nn.losses import focal_sigmoid_with_logits, focal_softmax_with_logits

IGNORE_THRESHOLD = 0.5
SLOTS = 3


def grid_size(input_size: int, stride: int) -> int:
    if input_size % 32:
        raise ValueError(f"input size {input_size} is not divisible by 32")
    return input_size // stride


def _cell_offsets(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return cx[None, :, :, None], cy[None, :, :, None]


def decode_level(raw: np.ndarray, anchors: np.ndarray, stride: int):
    """Boxes (corner form, pixels), objectness and class probabilities."""
    raw = np.asarray(raw, dtype=np.float64)
    n, h, w, a, _ = raw.shape
    cx, cy = _cell_offsets(h, w)
    bx = (sigmoid(raw[..., 0]) + cx) * stride
    by = (sigmoid(raw[..., 1]) + cy) * stride
    bw = anchors[:, 0] * np.exp(raw[..., 2])
    bh = anchors[:, 1] * np.exp(raw[..., 3])
    boxes = np.stack([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2], axis=-1)
    return boxes, sigmoid(raw[..., 4]), softmax(raw[..., 5:])


def decode(
    outputs: Sequence[np.ndarray],
    anchors: AnchorSet,
    input_size: int,
    conf_threshold: float = 0.0,
) -> list[list[Detection]]:
    """Detections per image, scored ``objectness * best class probability``
    and clipped to the ``input_size`` square."""
    per_image: list[list[Detection]] = [[] for _ in range(outputs[0].shape[0])]
    for level, raw in enumerate(outputs):
        boxes, obj, probs = decode_level(raw, anchors.level_anchors(level), LEVEL_STRIDES[level])
        cat = probs.argmax(axis=-1)
        score = obj * probs.max(axis=-1)
        for idx in zip(*np.nonzero(score >= conf_threshold)):
            b = boxes[idx]
            box = Box(
                min(max(b[0], 0.0), input_size),
                min(max(b[1], 0.0), input_size),
                min(max(b[2], 0.0), input_size),
                min(max(b[3], 0.0), input_size),
            )
            per_image[idx[0]].append(Detection(box, int(cat[idx]), float(min(max(score[idx], 0.0), 1.0))))
    return per_image


@dataclass
class LevelTargets:
    obj: np.ndarray  # (N, H, W, 3) bool, positives
    ignore: np.ndarray  # (N, H, W, 3) bool, exempt from the confidence loss
    coords: np.ndarray  # (N, H, W, 3, 4) offset x, offset y, log w ratio, log h ratio
    cls: np.ndarray  # (N, H, W, 3, C) one-hot at positives


@dataclass
class TargetSet:
    levels: list[LevelTargets]
    collisions: int = 0
    skipped: int = 0
    assignments: list[tuple[int, int, int, int, int, int]] = field(default_factory=list)

    @property
    def n_positive(self) -> int:
        return int(sum(lv.obj.sum() for lv in self.levels))


def build_targets(
    boxes: Sequence[np.ndarray],
    categories: Sequence[np.ndarray],
    anchors: AnchorSet,
    input_size: int,
    num_classes: int,
    ignore_threshold: float = IGNORE_THRESHOLD,
) -> TargetSet:
    """Assign every ground truth to its best anchor by ``wh_iou``.

    ``boxes[i]`` is an ``(G, 4)`` corner-form array in input-frame pixels for
    image ``i``. The responsible cell is ``floor(center / stride)`` on the
    level of the winning anchor. Cells whose prior box (anchor centred on
    the cell) overlaps any ground truth above ``ignore_threshold`` are
    ignored for the confidence loss unless they are positive. When two
    ground truths claim the same cell and slot the later one wins and the
    earlier is demoted to ignore.
    """
    n = len(boxes)
    per = anchors.k // 3
    levels = []
    for level, stride in enumerate(LEVEL_STRIDES):
        g = grid_size(input_size, stride)
        levels.append(
            LevelTargets(
                obj=np.zeros((n, g, g, per), dtype=bool),
                ignore=np.zeros((n, g, g, per), dtype=bool),
                coords=np.zeros((n, g, g, per, 4), dtype=np.float64),
                cls=np.zeros((n, g, g, per, num_classes), dtype=np.float64),
            )
        )
    out = TargetSet(levels)
    owner: dict[tuple[int, int, int, int, int], int] = {}
    for i in range(n):
        gt = np.asarray(boxes[i], dtype=np.float64).reshape(-1, 4)
        cats = np.asarray(categories[i]).reshape(-1)
        if len(gt) == 0:
            continue
        wh = gt[:, 2:] - gt[:, :2]
        valid = (wh > 0).all(axis=1)
        out.skipped += int((~valid).sum())
        # static ignore band from prior boxes
        for level, stride in enumerate(LEVEL_STRIDES):
            lv = levels[level]
            g = lv.obj.shape[1]
            cx, cy = _cell_offsets(g, g)
            la = anchors.level_anchors(level)
            centers_x = np.broadcast_to((cx + 0.5) * stride, (1, g, g, per))[0]
            centers_y = np.broadcast_to((cy + 0.5) * stride, (1, g, g, per))[0]
            pw = np.broadcast_to(la[:, 0], (g, g, per))
            ph = np.broadcast_to(la[:, 1], (g, g, per))
            priors = np.stack(
                [centers_x - pw / 2, centers_y - ph / 2, centers_x + pw / 2, centers_y + ph / 2], axis=-1
            ).reshape(-1, 4)
            best = iou_matrix(priors, gt[valid]).max(axis=1) if valid.any() else np.zeros(len(priors))
            lv.ignore[i] = (best > ignore_threshold).reshape(g, g, per)
        best_anchor = np.argmax(wh_iou_matrix(wh, anchors.anchors), axis=1)
        for j in np.flatnonzero(valid):
            a = int(best_anchor[j])
            level, slot = a // per, a % per
            stride = LEVEL_STRIDES[level]
            lv = levels[level]
            g = lv.obj.shape[1]
            cxp = 0.5 * (gt[j, 0] + gt[j, 2]) / stride
            cyp = 0.5 * (gt[j, 1] + gt[j, 3]) / stride
            col = min(int(np.floor(cxp)), g - 1)
            row = min(int(np.floor(cyp)), g - 1)
            key = (i, level, row, col, slot)
            if key in owner:
                out.collisions += 1
            owner[key] = j
            pw, ph = anchors.anchors[a]
            lv.obj[i, row, col, slot] = True
            lv.coords[i, row, col, slot] = (
                cxp - col,
                cyp - row,
                np.log(wh[j, 0] / pw),
                np.log(wh[j, 1] / ph),
            )
            lv.cls[i, row, col, slot] = 0.0
            lv.cls[i, row, col, slot, int(cats[j])] = 1.0
    for lv in levels:
        lv.ignore &= ~lv.obj
    out.assignments = sorted((k[0], k[1], k[2], k[3], k[4], v) for k, v in owner.items())
    return out


LOGIT_CLAMP = 1e-12


def targets_to_raw(targets: TargetSet, saturation: float = 30.0) -> list[np.ndarray]:
    """Raw outputs that decode exactly to the targets: objectness and class
    logits saturated at positives, objectness at ``-saturation`` elsewhere."""
    outs = []
    for lv in targets.levels:
        n, h, w, a = lv.obj.shape
        c = lv.cls.shape[-1]
        raw = np.zeros((n, h, w, a, 5 + c), dtype=np.float64)
        off = np.clip(lv.coords[..., :2], LOGIT_CLAMP, 1 - LOGIT_CLAMP)
        raw[..., :2] = np.log(off) - np.log1p(-off)
        raw[..., 2:4] = lv.coords[..., 2:4]
        raw[..., 4] = np.where(lv.obj, saturation, -saturation)
        raw[..., 5:] = np.where(lv.obj[..., None], saturation * (2 * lv.cls - 1), 0.0)
        outs.append(raw)
    return outs


@dataclass
class LossWeights:
    conf: float = 1.0
    cls: float = 1.0
    loc: float = 1.0


def total_loss(
    outputs: Sequence[np.ndarray],
    targets: TargetSet,
    weights: LossWeights | None = None,
    gamma: float = 2.0,
):
    """Weighted sum of confidence, classification and localisation losses.

    Confidence: sigmoid focal loss over all non-ignored locations.
    Classification: softmax focal loss at positives. Localisation: sum of
    squares of ``(sigmoid(tx), sigmoid(ty), tw, th)`` against the targets at
    positives. Everything is divided by the batch size. Returns
    ``(loss, {"conf", "cls", "loc"}, grads)`` with one gradient array per
    level, shaped like ``outputs``.
    """
    w = weights or LossWeights()
    n = outputs[0].shape[0]
    terms = {"conf": 0.0, "cls": 0.0, "loc": 0.0}
    grads = []
    for raw, lv in zip(outputs, targets.levels):
        grad = np.zeros_like(raw)
        # confidence
        conf_mask = ~lv.ignore
        loss_o, g_o = focal_sigmoid_with_logits(raw[..., 4], lv.obj, gamma, reduce=False)
        terms["conf"] += float(loss_o[conf_mask].sum())
        grad[..., 4] = np.where(conf_mask, g_o, 0.0) * (w.conf / n)
        if lv.obj.any():
            pos = lv.obj
            rp = raw[pos]
            # classification
            loss_c, g_c = focal_softmax_with_logits(rp[:, 5:], lv.cls[pos], gamma)
            terms["cls"] += loss_c
            # localisation
            sxy = sigmoid(rp[:, :2])
            tgt = lv.coords[pos]
            dxy = sxy - tgt[:, :2]
            dwh = rp[:, 2:4] - tgt[:, 2:4]
            terms["loc"] += float(np.sum(dxy * dxy) + np.sum(dwh * dwh))
            g_pos = np.zeros_like(rp)
            g_pos[:, :2] = 2 * dxy * sxy * (1 - sxy) * (w.loc / n)
            g_pos[:, 2:4] = 2 * dwh * (w.loc / n)
            g_pos[:, 5:] = g_c * (w.cls / n)
            g_pos[:, 4] = grad[..., 4][pos]
            grad[pos] = g_pos
        grads.append(grad)
    terms = {k: v / n for k, v in terms.items()}
    loss = w.conf * terms["conf"] + w.cls * terms["cls"] + w.loc * terms["loc"]
    return loss, terms, grads


def predict(
    model,
    raster: np.ndarray,
    conf_threshold: float = 0.25,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    input_size: int | None = None,
) -> list[Detection]:
    """Detections for one RGB raster, in its own pixel coordinates."""
    from .augment import letterbox_raster

    size = input_size or model.input_size
    if size % 32:
        raise ValueError(f"input size {size} is not divisible by 32")
    padded, tf = letterbox_raster(raster, size)
    x = (padded.astype(np.float32) / 255.0)[None]
    outputs = model.forward(x, train=False)
    dets = decode(outputs, model.anchors, size, conf_threshold)[0]
    dets = nms(dets, nms_threshold)
    h, w = raster.shape[:2]
    result = []
    for d in dets:
        box = tf.invert(d.box).clip(w, h)
        result.append(Detection(box, d.category, d.confidence))
    return result


def detections_to_json(image: str, dets: Sequence[Detection], categories: Sequence[str]) -> dict:
    return {
        "image": image,
        "detections": [
            {"category": categories[d.category], "bbox": [float(v) for v in d.box], "score": float(d.confidence)}
            for d in dets
        ],
    }
