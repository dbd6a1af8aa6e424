"""IoU-distance k-means anchors and their assignment to pyramid levels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .geometry import wh_iou_matrix

# Multi-scale training sizes; 540/572 of the original list are not multiples
# of 32 and are replaced by 544/576.
MS_SIZES = (416, 448, 480, 512, 544, 576, 608)
LEVEL_STRIDES = (8, 16, 32)


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (k, 2) sorted by area ascending
    levels: list[list[int]]

    @property
    def k(self) -> int:
        return len(self.anchors)

    def level_anchors(self, level: int) -> np.ndarray:
        return self.anchors[self.levels[level]]

    def to_json(self) -> dict:
        return {
            "anchors": [[float(w), float(h)] for w, h in self.anchors],
            "levels": [list(map(int, g)) for g in self.levels],
        }

    @classmethod
    def from_pairs(cls, pairs) -> "AnchorSet":
        return assign_scales(pairs)


def assign_scales(anchors) -> AnchorSet:
    """Sort anchors by area and split into thirds; third 0 goes to stride 8,
    third 1 to stride 16, third 2 to stride 32."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(a) % 3:
        raise ValueError(f"anchor count must be divisible by 3, got {len(a)}")
    order = sorted(range(len(a)), key=lambda i: (a[i, 0] * a[i, 1], a[i, 0], a[i, 1], i))
    sorted_a = a[order]
    per = len(a) // 3
    levels = [list(range(g * per, (g + 1) * per)) for g in range(3)]
    return AnchorSet(sorted_a, levels)


def label_wh(dataset: Dataset, sizes: Sequence[int] | None = None) -> np.ndarray:
    """Ground-truth (w, h) pairs, letterbox-scaled to every size and pooled.

    With ``sizes=None`` the native pixel dimensions are returned.
    """
    raw, longest = [], []
    for rec in dataset.records:
        for lb in rec.labels:
            raw.append((lb.box.width, lb.box.height))
            longest.append(max(rec.width, rec.height))
    wh = np.array(raw, dtype=np.float64).reshape(-1, 2)
    if sizes is None:
        return wh
    longest = np.array(longest, dtype=np.float64)
    return np.concatenate([wh * (s / longest)[:, None] for s in sizes], axis=0)


def kmeans_objective(points: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum(1.0 - wh_iou_matrix(points, centroids).max(axis=1)))


def _seed_centroids(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Farthest-point-style seeding: a random first box, then each next box
    drawn with probability proportional to its squared distance to the
    nearest chosen one (k-means++ under ``1 - wh_iou``)."""
    chosen = [int(rng.integers(len(points)))]
    dist = 1.0 - wh_iou_matrix(points, points[chosen[0]])[:, 0]
    for _ in range(1, k):
        w = dist * dist
        nxt = int(rng.choice(len(points), p=w / w.sum())) if w.sum() > 0 else int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - wh_iou_matrix(points, points[nxt])[:, 0])
    return points[chosen].copy()


def _partition_means(points: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray | None:
    counts = np.bincount(assign, minlength=k)
    if (counts == 0).any():
        return None
    sums = np.zeros((k, 2))
    np.add.at(sums, assign, points)
    return sums / counts[:, None]


def _polish(points: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    """Local search over partitions: single-box moves and pairwise swaps,
    accepted when the objective of the resulting cluster means drops."""
    assign = assign.copy()
    cost = kmeans_objective(points, _partition_means(points, assign, k))
    n = len(points)

    def trial(a):
        cent = _partition_means(points, a, k)
        return np.inf if cent is None else kmeans_objective(points, cent)

    improved = True
    while improved:
        improved = False
        for i in range(n):
            for c in range(k):
                if c == assign[i]:
                    continue
                old = assign[i]
                assign[i] = c
                new = trial(assign)
                if new < cost - 1e-12:
                    cost, improved = new, True
                else:
                    assign[i] = old
        for i in range(n):
            for j in range(i + 1, n):
                if assign[i] == assign[j]:
                    continue
                assign[i], assign[j] = assign[j], assign[i]
                new = trial(assign)
                if new < cost - 1e-12:
                    cost, improved = new, True
                else:
                    assign[i], assign[j] = assign[j], assign[i]
    return assign, cost


POLISH_LIMIT = 64


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    history: list[float]
    iterations: int
    objective: float


def cluster_wh(
    points, k: int, seed: int = 0, max_iter: int = 300, polish_limit: int = POLISH_LIMIT
) -> KMeansResult:
    """k-means on (w, h) pairs with distance ``1 - wh_iou``.

    Centroids move to the arithmetic mean of their members; an empty cluster
    is reseeded at the box with the worst best IoU. Iteration stops when
    assignments repeat or at ``max_iter``. ``history`` holds the objective
    after every centroid update. Under this distance the mean is not the
    per-cluster minimiser, so the objective can rise between iterations; the
    best iterate is returned. Inputs of at most ``polish_limit`` boxes are
    then refined by exhaustive single-move and swap local search.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError("k must be >= 1")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    n_distinct = len(np.unique(pts, axis=0))
    if n_distinct < k:
        raise ValueError(f"need at least {k} distinct boxes, got {n_distinct}")
    rng = np.random.default_rng(seed)
    cent = _seed_centroids(pts, k, rng)
    rows = np.arange(len(pts))
    assign = np.full(len(pts), -1)
    history: list[float] = []
    best_obj, best_cent = np.inf, cent.copy()
    it = 0
    for it in range(1, max_iter + 1):
        ious = wh_iou_matrix(pts, cent)
        new_assign = np.argmax(ious, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        best = ious[rows, assign].copy()
        for c in range(k):
            members = assign == c
            if members.any():
                cent[c] = pts[members].mean(axis=0)
            else:
                worst = int(np.argmin(best))
                cent[c] = pts[worst]
                best[worst] = 1.0
        obj = kmeans_objective(pts, cent)
        history.append(obj)
        if obj < best_obj:
            best_obj, best_cent = obj, cent.copy()
    cent = best_cent
    if len(pts) <= polish_limit and k > 1:
        polished, cost = _polish(pts, np.argmax(wh_iou_matrix(pts, cent), axis=1), k)
        if cost < best_obj:
            cent = _partition_means(pts, polished, k)
            best_obj = cost
    return KMeansResult(cent, np.argmax(wh_iou_matrix(pts, cent), axis=1), history, it, best_obj)


def kmeans_anchors(
    dataset: Dataset | np.ndarray,
    k: int = 9,
    sizes: Sequence[int] | None = MS_SIZES,
    seed: int = 0,
    max_iter: int = 300,
) -> AnchorSet:
    if k % 3:
        raise ValueError(f"k must be divisible by 3 for three pyramid levels, got {k}")
    if isinstance(dataset, Dataset):
        if sizes is not None and len(sizes) == 0:
            raise ValueError("sizes must be non-empty")
        points = label_wh(dataset, sizes)
    else:
        points = np.asarray(dataset, dtype=np.float64).reshape(-1, 2)
    if len(points) < k:
        raise ValueError(f"need at least {k} labels, got {len(points)}")
    result = cluster_wh(points, k, seed=seed, max_iter=max_iter)
    return assign_scales(result.centroids)


def anchor_quality(anchors, dataset: Dataset | np.ndarray, size: int | None = None) -> tuple[float, float]:
    """Mean best IoU between ground truths and anchors, and the fraction >= 0.5."""
    a = anchors.anchors if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    if isinstance(dataset, Dataset):
        wh = label_wh(dataset, None if size is None else [size])
    else:
        wh = np.asarray(dataset, dtype=np.float64).reshape(-1, 2)
    if len(wh) == 0 or len(a) == 0:
        raise ValueError("anchor_quality needs at least one box and one anchor")
    best = wh_iou_matrix(wh, a).max(axis=1)
    return float(best.mean()), float(np.mean(best >= 0.5))
