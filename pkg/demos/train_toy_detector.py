#!/usr/bin/env python3
"""Train the toy detector on synthetic damage images, report mAP and draw
the detections for a few held-out images.

The defaults take around five minutes on one CPU core."""
import argparse
import json
from pathlib import Path

from sddkit.augment import draw_boxes, write_png
from sddkit.head import predict
from sddkit.synthgen import generate, preset
from sddkit.train import TrainConfig, evaluate, train

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--width", type=int, default=2)
ap.add_argument("--norm", choices=["bn", "br"], default="br")
ap.add_argument("--out", default="toy_run")
args = ap.parse_args()

train_set = generate(preset("target", 300, 128, seed=0))
test_set = generate(preset("target", 60, 128, seed=1))

# two thirds of the epochs at 1e-3, then two short decay stages
hi = round(args.epochs * 2 / 3)
mid = round(args.epochs * 0.2)
schedule = [(1e-3, hi), (1e-4, mid), (1e-5, args.epochs - hi - mid)]
cfg = TrainConfig(epochs=args.epochs, schedule=schedule, sizes=(128,), eval_size=128, width=args.width,
                  norm=args.norm, val_every=5)

result = train(train_set, cfg, val=test_set, out_dir=args.out)
for entry in result.log:
    line = f"epoch {entry['epoch']:3d}  lr {entry['lr']:.0e}  loss {entry['loss']:7.3f}"
    if "map50" in entry:
        line += f"  mAP50 {entry['map50']:.3f}  mAP75 {entry['map75']:.3f}"
    print(line)

res = evaluate(result.model, test_set, 128)
print(json.dumps(res.to_json(test_set.categories), indent=2))

out = Path(args.out)
for i in range(4):
    raster = test_set.load_raster(i)
    dets = predict(result.model, raster, 0.3, 0.45, 128)
    names = [f"{test_set.categories[d.category]} {d.confidence:.2f}" for d in dets]
    img = draw_boxes(raster, test_set.records[i].boxes, color=(0, 200, 0))
    write_png(out / f"detections_{i}.png", draw_boxes(img, [d.box for d in dets], names))
print(f"checkpoint and overlays in {out}/")
