"""Detection matching, per-category average precision and mAP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .geometry import Detection, iou_matrix

IOU_THRESHOLDS = (0.5, 0.75)


@dataclass
class MatchResult:
    """Per-image matching outcome.

    ``order`` lists detection indices by descending confidence; ``tp`` and
    ``matched`` follow that order. ``n_gt`` counts ground truths per category.
    """

    order: list[int]
    tp: np.ndarray
    matched: list[int | None]
    confidences: np.ndarray
    categories: np.ndarray
    n_gt: dict[int, int]
    false_negatives: int


def _det_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match_detections(
    dets: Sequence[Detection],
    gt_boxes: np.ndarray,
    gt_categories: np.ndarray,
    iou_thr: float = 0.5,
) -> MatchResult:
    """Greedy matching in confidence order.

    Each detection takes the not-yet-matched ground truth of its own category
    with the highest IoU; it is a true positive when that IoU reaches
    ``iou_thr``. Ground truths already claimed cannot be matched again.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_categories = np.asarray(gt_categories, dtype=np.int64).reshape(-1)
    order = _det_order(dets)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    matched: list[int | None] = [None] * len(order)
    if len(order) and len(gt_boxes):
        ious = iou_matrix(np.array([dets[i].box for i in order]), gt_boxes)
        for rank, i in enumerate(order):
            cand = (gt_categories == dets[i].category) & ~taken
            if not cand.any():
                continue
            row = np.where(cand, ious[rank], -1.0)
            j = int(np.argmax(row))
            if row[j] >= iou_thr:
                tp[rank] = True
                taken[j] = True
                matched[rank] = j
    n_gt = {int(c): int(n) for c, n in zip(*np.unique(gt_categories, return_counts=True))}
    return MatchResult(
        order=order,
        tp=tp,
        matched=matched,
        confidences=np.array([dets[i].confidence for i in order], dtype=np.float64),
        categories=np.array([dets[i].category for i in order], dtype=np.int64),
        n_gt=n_gt,
        false_negatives=int((~taken).sum()),
    )


def pr_curve(confidences: np.ndarray, tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection, in the given order."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return recall, precision


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP: area under the non-increasing precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(matches: Sequence[MatchResult], category: int) -> tuple[float, np.ndarray, np.ndarray]:
    """AP of ``category`` accumulated over images in global confidence order.

    Confidence ties are broken by (image index, rank within image). Raises
    ``ValueError`` when the category has no ground truth.
    """
    n_gt = sum(m.n_gt.get(category, 0) for m in matches)
    if n_gt == 0:
        raise ValueError(f"category {category} has no ground truth; AP undefined")
    conf, tp, img, rank = [], [], [], []
    for i, m in enumerate(matches):
        sel = np.flatnonzero(m.categories == category)
        conf.append(m.confidences[sel])
        tp.append(m.tp[sel])
        img.append(np.full(len(sel), i))
        rank.append(sel)
    conf = np.concatenate(conf) if conf else np.zeros(0)
    tp = np.concatenate(tp) if tp else np.zeros(0, dtype=bool)
    img = np.concatenate(img) if img else np.zeros(0, dtype=int)
    rank = np.concatenate(rank) if rank else np.zeros(0, dtype=int)
    if len(conf) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    order = np.lexsort((rank, img, -conf))
    recall, precision = pr_curve(conf[order], tp[order], n_gt)
    return ap_from_pr(recall, precision), recall, precision


@dataclass
class APResult:
    per_class: dict[int, dict[float, float]]
    map: dict[float, float]
    counts: dict[str, int] = field(default_factory=dict)
    curves: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def to_json(self, categories: Sequence[str]) -> dict:
        per = {}
        for c, aps in self.per_class.items():
            per[categories[c]] = {f"ap{int(round(t * 100))}": float(v) for t, v in aps.items()}
        out = {"per_class": per}
        for t, v in self.map.items():
            out[f"map{int(round(t * 100))}"] = float(v)
        out["counts"] = dict(self.counts)
        return out


def mean_ap(
    dets_per_image: Sequence[Sequence[Detection]],
    dataset: Dataset,
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> APResult:
    """Per-category AP and their mean, for each IoU threshold.

    Categories with no ground truth are left out of the mean.
    """
    if len(dets_per_image) != len(dataset):
        raise ValueError(f"{len(dets_per_image)} detection lists for {len(dataset)} images")
    if dataset.num_labels == 0:
        raise ValueError("ground truth contains no objects; mAP undefined")
    n_cat = len(dataset.categories)
    present = sorted({lb.category for r in dataset.records for lb in r.labels})
    per_class: dict[int, dict[float, float]] = {c: {} for c in present}
    result = APResult(per_class, {})
    for thr in thresholds:
        matches = [
            match_detections(d, rec.boxes, rec.categories, thr) for d, rec in zip(dets_per_image, dataset.records)
        ]
        for c in present:
            ap, rec_, prec_ = average_precision(matches, c)
            per_class[c][thr] = ap
            result.curves[(c, thr)] = (rec_, prec_)
        result.map[thr] = float(np.mean([per_class[c][thr] for c in present]))
        if thr == thresholds[0]:
            result.counts = {
                "images": len(dataset),
                "ground_truths": dataset.num_labels,
                "detections": int(sum(len(d) for d in dets_per_image)),
                "categories_evaluated": len(present),
                "categories_total": n_cat,
            }
    return result


def load_detections_jsonl(path, dataset: Dataset) -> list[list[Detection]]:
    """Detection lists aligned with ``dataset.records`` from a predictions file.

    Lines are ``{"image", "detections": [{"category", "bbox", "score"}]}``;
    images absent from the file get no detections.
    """
    from .dataset import DatasetError
    from .geometry import Box

    by_image: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                dets = [
                    Detection(Box(*map(float, d["bbox"])), dataset.category_id(d["category"]), float(d["score"]))
                    for d in obj["detections"]
                ]
                image = str(obj["image"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"malformed detection record ({exc})", path, lineno) from None
            if image in by_image:
                raise DatasetError(f"duplicate image {image!r}", path, lineno)
            by_image[image] = dets
    known = {r.image for r in dataset.records}
    extra = sorted(set(by_image) - known)
    if extra:
        raise ValueError(f"detections for images not in ground truth: {extra[:5]}")
    return [by_image.get(r.image, []) for r in dataset.records]
