"""Command-line entry point: ``sddkit <subcommand> ...``.

Every subcommand prints one JSON document on stdout. Exit status is 0 on
success, 2 on usage errors (argparse) and 1 on operational failures, in
which case the JSON payload is ``{"error": {"type": ..., "message": ...}}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .anchors import MS_SIZES, anchor_quality, kmeans_anchors
from .augment import AugmentConfig, Sample, augment_pipeline, draw_boxes, write_png
from .dataset import (
    DEFAULT_CATEGORIES,
    Dataset,
    compute_stats,
    holdout_split,
    kfold_split,
    load_dataset,
    rank_source_classes,
    save_jsonl,
)
from .evaluation import load_detections_jsonl, mean_ap
from .gradsuite import CHECKS, run_suite
from .head import LossWeights, detections_to_json, predict
from .model import load_checkpoint
from .synthgen import generate, preset, save_dataset
from .train import TrainConfig, scaled_schedule, tl_harness

log = logging.getLogger("sddkit")

CATEGORIES_SIDECAR = "categories.json"


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _categories(args, path) -> tuple[str, ...]:
    if getattr(args, "categories", None):
        return tuple(c.strip() for c in args.categories.split(","))
    p = Path(path)
    sidecar = (p if p.is_dir() else p.parent) / CATEGORIES_SIDECAR
    if sidecar.exists():
        return tuple(json.loads(sidecar.read_text(encoding="utf-8")))
    return DEFAULT_CATEGORIES


def _load(args, path) -> Dataset:
    return load_dataset(path, _categories(args, path))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> dict:
    ds = generate(preset(args.preset, args.n, args.size, args.seed))
    index = save_dataset(ds, args.out)
    (Path(args.out) / CATEGORIES_SIDECAR).write_text(json.dumps(list(ds.categories)), encoding="utf-8")
    return {"dataset": str(index), "images": len(ds), "objects": ds.num_labels, "categories": list(ds.categories)}


def cmd_stats(args) -> dict:
    ds = _load(args, args.data)
    return compute_stats(ds).to_json(ds.categories)


def cmd_split(args) -> dict:
    ds = _load(args, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "holdout":
        train, test = holdout_split(ds, args.ratio, args.seed)
        save_jsonl(train, out / "train.jsonl")
        save_jsonl(test, out / "test.jsonl")
        return {"mode": "holdout", "train": len(train), "test": len(test),
                "files": [str(out / "train.jsonl"), str(out / "test.jsonl")]}
    folds = kfold_split(ds, args.k, args.seed)
    files = []
    for i, fold in enumerate(folds):
        path = out / f"fold{i}.jsonl"
        save_jsonl(ds.subset(fold), path)
        files.append(str(path))
    return {"mode": "kfold", "k": args.k, "sizes": [len(f) for f in folds], "files": files}


def cmd_anchors(args) -> dict:
    ds = _load(args, args.data)
    sizes = args.sizes or MS_SIZES
    anchors = kmeans_anchors(ds, args.k, sizes, seed=args.seed, max_iter=args.max_iter)
    mean_iou, recall = anchor_quality(anchors, ds, args.quality_size)
    return {**anchors.to_json(), "strides": [8, 16, 32], "sizes": list(sizes),
            "avg_iou": mean_iou, "recall50": recall}


def cmd_augment(args) -> dict:
    ds = _load(args, args.data)
    cfg = AugmentConfig(target_size=args.size, seed=args.seed)
    n = min(args.preview if args.preview else args.n, len(ds))
    out = Path(args.out) if args.out else None
    if args.preview and out is None:
        raise ValueError("--preview needs --out")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    logs = []
    for i in range(n):
        rec = ds.records[i]
        rng = np.random.default_rng([args.seed, i])
        sample, alog = augment_pipeline(Sample(ds.load_raster(i), rec.boxes, rec.categories), cfg, rng)
        entry = {"image": rec.image, "geom": alog.geom, "flip": alog.flip, "photo": alog.photo,
                 "boxes": sample.boxes.tolist()}
        if args.preview:
            path = out / f"preview_{i:04d}.png"
            names = [ds.categories[c] for c in sample.categories]
            write_png(path, draw_boxes(sample.raster, sample.boxes, names))
            entry["preview"] = str(path)
        logs.append(entry)
    return {"samples": logs}


def cmd_gradcheck(args) -> dict:
    only = args.only.split(",") if args.only else None
    if only:
        unknown = sorted(set(only) - set(CHECKS))
        if unknown:
            raise ValueError(f"unknown checks {unknown}; available: {sorted(CHECKS)}")
    result = run_suite(args.tol, args.seed, only)
    if not result["passed"]:
        failed = [c["name"] for c in result["checks"] if not c["passed"]]
        raise GradcheckFailed(result, failed)
    return result


class GradcheckFailed(RuntimeError):
    def __init__(self, result, failed):
        super().__init__(f"gradient checks failed: {failed}")
        self.result = result


def cmd_train(args) -> dict:
    target = _load(args, args.data)
    source = _load(args, args.source_data) if args.source_data else None
    test = _load(args, args.test_data) if args.test_data else None
    sizes = args.sizes or MS_SIZES
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        schedule=scaled_schedule(args.epochs),
        sizes=sizes,
        strict_sizes=not args.allow_indivisible,
        seed=args.seed,
        gamma=args.gamma,
        loss_weights=LossWeights(args.lambda_conf, args.lambda_cls, args.lambda_loc),
        norm=args.norm,
        width=args.width,
        val_every=args.val_every,
        eval_size=args.eval_size,
        augment=AugmentConfig(seed=args.seed) if not args.no_augment else AugmentConfig(seed=args.seed).disabled(),
    )
    result = tl_harness(target, args.tl, cfg, source=source, donor=args.donor, test=test, out_dir=args.out)
    out = Path(args.out)
    return {
        "out": str(out),
        "checkpoint": str(out / "final.ckpt"),
        "metrics": str(out / "metrics.jsonl"),
        "epochs": cfg.epochs,
        "schedule": [list(s) for s in cfg.schedule],
        # wall-clock fields stay in metrics.jsonl so the payload is reproducible
        "final": {k: v for k, v in result.log[-1].items() if k != "seconds"} if result.log else None,
        **result.report,
    }


def cmd_eval(args) -> dict:
    gt = _load(args, args.gt)
    dets = load_detections_jsonl(args.dets, gt)
    return mean_ap(dets, gt).to_json(gt.categories)


def cmd_predict(args) -> dict:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, model.categories)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "detections.jsonl"
    total = 0
    with open(path, "w", encoding="utf-8") as fh:
        for i, rec in enumerate(ds.records):
            raster = ds.load_raster(i)
            dets = predict(model, raster, args.conf, args.nms, input_size=args.size)
            total += len(dets)
            fh.write(json.dumps(detections_to_json(rec.image, dets, model.categories)) + "\n")
            if args.overlay:
                names = [f"{model.categories[d.category]} {d.confidence:.2f}" for d in dets]
                img = draw_boxes(raster, [d.box for d in dets], names)
                write_png(out / f"overlay_{Path(rec.image).stem}.png", img)
    return {"detections": str(path), "images": len(ds), "total_detections": total}


def cmd_rank_sources(args) -> dict:
    target = _load(args, args.target)
    if args.source_categories:
        names = tuple(c.strip() for c in args.source_categories.split(","))
    else:
        names = _categories(argparse.Namespace(), args.source)
    source = load_dataset(args.source, names)
    ranked = rank_source_classes(source, target)
    return {"ranking": [{"category": source.categories[c], "distance": d} for c, d in ranked]}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sddkit", description="Surface-damage detection toolkit")
    p.add_argument("--version", action="version", version=f"sddkit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--categories", help="comma-separated category names (default: sidecar or built-in)")
        return s

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--preset", choices=["target", "source"], default="target")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = data_cmd("stats", "category counts and object-size statistics")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_stats)

    s = data_cmd("split", "hold-out or k-fold split")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["holdout", "kfold"], default="holdout")
    s.add_argument("--ratio", type=float, default=0.8)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = data_cmd("anchors", "k-means anchors on IoU distance")
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=9)
    s.add_argument("--sizes", type=_int_list, help="comma-separated training sizes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iter", type=int, default=300)
    s.add_argument("--quality-size", type=int, default=None, help="letterbox size for the quality report")
    s.set_defaults(func=cmd_anchors)

    s = data_cmd("augment", "run the augmentation pipeline on the first N images")
    s.add_argument("--data", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=416)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--preview", type=int, metavar="N", default=0,
                   help="write N augmented PNGs with boxes drawn (overrides --n)")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--only", help=f"comma-separated subset of: {','.join(CHECKS)}")
    s.set_defaults(func=cmd_gradcheck)

    s = data_cmd("train", "train the toy detector, optionally with transfer learning")
    s.add_argument("--data", required=True, help="target training set")
    s.add_argument("--source-data", help="intermediate source set for --tl b")
    s.add_argument("--test-data", help="held-out set evaluated during and after training")
    s.add_argument("--tl", choices=["none", "a", "b"], default="none")
    s.add_argument("--donor", help="checkpoint whose backbone initialises the model (TL-A, optional for TL-B)")
    s.add_argument("--epochs", type=int, default=80)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--sizes", type=_int_list, help="comma-separated multi-scale sizes")
    s.add_argument("--allow-indivisible", action="store_true", help="floor sizes to multiples of 32")
    s.add_argument("--norm", choices=["bn", "br"], default="br")
    s.add_argument("--gamma", type=float, default=2.0)
    s.add_argument("--lambda-conf", type=float, default=1.0)
    s.add_argument("--lambda-cls", type=float, default=1.0)
    s.add_argument("--lambda-loc", type=float, default=1.0)
    s.add_argument("--width", type=int, default=1)
    s.add_argument("--val-every", type=int, default=5)
    s.add_argument("--eval-size", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = data_cmd("eval", "mAP of a detections file against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--dets", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="run a checkpoint over a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--conf", type=float, default=0.25)
    s.add_argument("--nms", type=float, default=0.45)
    s.add_argument("--size", type=int, help="letterbox size (default: the model's)")
    s.add_argument("--overlay", action="store_true", help="write PNGs with detections drawn")
    s.set_defaults(func=cmd_predict)

    s = data_cmd("rank-sources", "order source categories by scale/aspect similarity to a target")
    s.add_argument("--target", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--source-categories", help="category names of the source set")
    s.set_defaults(func=cmd_rank_sources)
    return p


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SDDKIT_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                payload = args.func(args)
        else:
            payload = args.func(args)
    except GradcheckFailed as exc:
        _emit({"error": {"type": "GradcheckFailed", "message": str(exc)}, **exc.result})
        return 1
    except Exception as exc:  # operational failure: structured error, exit 1
        log.debug("command failed", exc_info=True)
        err = {"type": type(exc).__name__, "message": str(exc)}
        if hasattr(exc, "to_dict"):
            err.update(exc.to_dict())
        _emit({"error": err})
        return 1
    _emit(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
