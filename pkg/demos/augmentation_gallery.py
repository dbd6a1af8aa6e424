#!/usr/bin/env python3
"""Run the augmentation pipeline over a few synthetic images and save a
side-by-side PNG of each original (letterboxed) and augmented sample."""
import argparse
from pathlib import Path

import numpy as np

from sddkit.augment import AugmentConfig, Sample, augment_pipeline, draw_boxes, letterbox, rng_for, write_png
from sddkit.synthgen import generate, preset

ap = argparse.ArgumentParser()
ap.add_argument("--n", type=int, default=6)
ap.add_argument("--size", type=int, default=256)
ap.add_argument("--out", default="augment_gallery")
args = ap.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
ds = generate(preset("target", args.n, 160, seed=3))
cfg = AugmentConfig(target_size=args.size)

for i, rec in enumerate(ds.records):
    sample = Sample(ds.load_raster(i), rec.boxes, rec.categories)
    plain, _ = letterbox(sample, args.size)
    aug, log = augment_pipeline(sample, cfg, rng_for(0, i))
    left = draw_boxes(plain.raster, plain.boxes)
    right = draw_boxes(aug.raster, aug.boxes, color=(0, 255, 0))
    write_png(out / f"pair_{i:02d}.png", np.concatenate([left, right], axis=1))
    print(f"{rec.image}: crop={log.geom} flip={log.flip} photo={log.photo}")

print(f"wrote {len(ds)} pairs to {out}/")
