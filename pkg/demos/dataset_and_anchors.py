#!/usr/bin/env python3
"""Generate a synthetic damage set, look at its label statistics, pick a
source category order for transfer learning and cluster anchors."""
import argparse

import numpy as np

from sddkit.anchors import MS_SIZES, anchor_quality, kmeans_anchors, label_wh
from sddkit.dataset import compute_stats, rank_source_classes
from sddkit.synthgen import generate, preset

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=200)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

target = generate(preset("target", args.n, 128, seed=args.seed))
source = generate(preset("source", args.n, 128, seed=args.seed + 1))

stats = compute_stats(target)
print(f"{len(target)} images, {target.num_labels} objects")
for name, frac in zip(target.categories, stats.fractions):
    print(f"  {name:14s} {frac:6.1%}")
print(f"median relative area {stats.median_relative_area:.4f}")

print("\nsource categories, closest scale/aspect profile first:")
for cat, dist in rank_source_classes(source, target):
    print(f"  {source.categories[cat]:8s} hellinger {dist:.3f}")

anchors = kmeans_anchors(target, 9, MS_SIZES, seed=args.seed)
print("\nanchors (w, h) per stride:")
for level, stride in enumerate((8, 16, 32)):
    print(f"  {stride:2d}: " + "  ".join(f"{w:5.1f}x{h:<5.1f}" for w, h in anchors.level_anchors(level)))

# compare against anchors drawn at random from the labels themselves
wh = label_wh(target, (416,))
rng = np.random.default_rng(args.seed)
random_anchors = wh[rng.choice(len(wh), 9, replace=False)]
for name, a in (("k-means", anchors), ("random", random_anchors)):
    mean_iou, recall = anchor_quality(a, target, 416)
    print(f"{name:8s} mean best IoU {mean_iou:.3f}  recall@0.5 {recall:.3f}")
