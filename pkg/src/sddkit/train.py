"""Training loop, learning-rate schedule, evaluation and the transfer-learning harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import MS_SIZES, AnchorSet, kmeans_anchors
from .augment import AugmentConfig, Sample, augment_pipeline
from .dataset import Dataset
from .evaluation import APResult, mean_ap
from .head import LossWeights, build_targets, predict, total_loss
from .model import DetectorModel, build_toy_detector, init_weights, save_checkpoint
from .nn.optim import Adam

log = logging.getLogger(__name__)

PAPER_SCHEDULE = ((1e-3, 25), (1e-4, 25), (1e-5, 15), (1e-6, 15))
TL_SOURCE_EPOCHS, TL_TARGET_EPOCHS = 30, 50


class TrainingError(RuntimeError):
    pass


def scaled_schedule(epochs: int, base=PAPER_SCHEDULE) -> tuple[tuple[float, int], ...]:
    """Stage lengths of ``base`` rescaled to ``epochs`` (largest remainder rounding)."""
    total = sum(n for _, n in base)
    exact = [n * epochs / total for _, n in base]
    counts = [int(e) for e in exact]
    for i in sorted(range(len(base)), key=lambda i: counts[i] - exact[i])[: epochs - sum(counts)]:
        counts[i] += 1
    return tuple((lr, n) for (lr, _), n in zip(base, counts))


def lr_at(epoch: int, schedule: Sequence[tuple[float, int]]) -> float:
    """Learning rate of 1-based ``epoch``."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    end = 0
    for lr, n in schedule:
        end += n
        if epoch <= end:
            return lr
    return schedule[-1][0]


def tl_b_split(epochs: int) -> tuple[int, int]:
    """(source epochs, target epochs) in the 30:50 proportion."""
    src = int(round(epochs * TL_SOURCE_EPOCHS / (TL_SOURCE_EPOCHS + TL_TARGET_EPOCHS)))
    return src, epochs - src


def effective_size(size: int, strict: bool = True) -> int:
    if size % 32 == 0:
        return size
    if strict:
        raise ValueError(f"input size {size} is not divisible by 32")
    return (size // 32) * 32


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 2
    weight_decay: float = 1e-4
    schedule: tuple[tuple[float, int], ...] | None = PAPER_SCHEDULE
    sizes: tuple[int, ...] = MS_SIZES
    strict_sizes: bool = True
    seed: int = 0
    gamma: float = 2.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    norm: str = "br"
    width: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ignore_threshold: float = 0.5
    val_every: int = 5
    eval_size: int | None = None
    conf_threshold: float = 0.01
    nms_threshold: float = 0.45
    br_ramp_steps: int = 0
    checkpoint_stages: bool = True

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = scaled_schedule(self.epochs)
        self.schedule = tuple((float(lr), int(n)) for lr, n in self.schedule)
        if sum(n for _, n in self.schedule) != self.epochs:
            raise ValueError(
                f"schedule covers {sum(n for _, n in self.schedule)} epochs but epochs={self.epochs}"
            )
        self.sizes = tuple(effective_size(s, self.strict_sizes) for s in self.sizes)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.norm not in ("bn", "br"):
            raise ValueError(f"norm must be 'bn' or 'br', got {self.norm!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["schedule"] = [list(s) for s in self.schedule]
        d["sizes"] = list(self.sizes)
        return d


@dataclass
class TrainResult:
    model: DetectorModel
    log: list[dict]
    anchors: AnchorSet
    report: dict = field(default_factory=dict)


def record_sample(dataset: Dataset, index: int) -> Sample:
    rec = dataset.records[index]
    return Sample(dataset.load_raster(index), rec.boxes, rec.categories)


def make_batch(dataset: Dataset, indices: Sequence[int], size: int, aug: AugmentConfig, seed: int, epoch: int):
    """Augmented, letterboxed float batch plus per-image boxes and categories."""
    rasters, boxes, cats = [], [], []
    cfg = replace(aug, target_size=size)
    for idx in indices:
        rng = np.random.default_rng([seed, epoch, int(idx)])
        s, _ = augment_pipeline(record_sample(dataset, int(idx)), cfg, rng)
        rasters.append(s.raster)
        boxes.append(s.boxes)
        cats.append(s.categories)
    x = np.stack(rasters).astype(np.float32) / 255.0
    return x, boxes, cats


def _set_br_limits(model: DetectorModel, step: int, ramp: int, r_max: float = 1.5, d_max: float = 0.5):
    frac = 1.0 if ramp <= 0 else min(1.0, step / ramp)
    for norm in model.norms():
        norm.r_max = 1.0 + (r_max - 1.0) * frac
        norm.d_max = d_max * frac


def train_loop(
    model: DetectorModel,
    dataset: Dataset,
    config: TrainConfig,
    start_epoch: int = 1,
    end_epoch: int | None = None,
    phase: str = "train",
    val: Dataset | None = None,
    out_dir: str | Path | None = None,
    metrics: list[dict] | None = None,
) -> list[dict]:
    """Train ``model`` in place for epochs ``start_epoch..end_epoch`` of the schedule.

    Per batch: draw an input size uniformly from ``config.sizes``, augment and
    letterbox, forward, loss, backward and an Adam step. One JSON-able dict is
    appended to ``metrics`` per epoch (and written to ``metrics.jsonl`` in
    ``out_dir``).
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model.anchors is None:
        raise ValueError("model has no anchors")
    end_epoch = config.epochs if end_epoch is None else end_epoch
    metrics = [] if metrics is None else metrics
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    decay_params = model.parameters()
    opt = Adam(decay_params, lr=lr_at(start_epoch, config.schedule), weight_decay=config.weight_decay)
    n = len(dataset)
    bs = config.batch_size
    step = 0
    stage_ends = np.cumsum([s for _, s in config.schedule])
    for epoch in range(start_epoch, end_epoch + 1):
        t0 = time.perf_counter()
        opt.lr = lr_at(epoch, config.schedule)
        rng = np.random.default_rng([config.seed, epoch, 7])
        order = rng.permutation(n)
        totals = {"loss": 0.0, "conf": 0.0, "cls": 0.0, "loc": 0.0}
        n_batches = 0
        for b0 in range(0, n, bs):
            idx = order[b0 : b0 + bs]
            size = int(rng.choice(config.sizes))
            x, boxes, cats = make_batch(dataset, idx, size, config.augment, config.seed, epoch)
            if model.norm_mode == "br" and config.br_ramp_steps:
                _set_br_limits(model, step, config.br_ramp_steps)
            try:
                outputs = model.forward(x, train=True)
            except FloatingPointError:
                outputs = None
                loss = float("nan")
            if outputs is not None:
                targets = build_targets(boxes, cats, model.anchors, size, model.num_classes,
                                        config.ignore_threshold)
                loss, terms, grads = total_loss(outputs, targets, config.loss_weights, config.gamma)
            if not np.isfinite(loss):
                if out is not None:
                    save_checkpoint(model, out / "diagnostic.ckpt", {"epoch": epoch, "loss": repr(loss)})
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {n_batches}")
            opt.zero_grad()
            model.backward(grads)
            opt.step()
            step += 1
            n_batches += 1
            totals["loss"] += loss
            for k, v in terms.items():
                totals[k] += v
        entry = {
            "phase": phase,
            "epoch": epoch,
            "lr": opt.lr,
            **{k: v / n_batches for k, v in totals.items()},
            "steps": n_batches,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if val is not None and config.val_every and (epoch % config.val_every == 0 or epoch == end_epoch):
            res = evaluate(model, val, config.eval_size or max(config.sizes), config.conf_threshold,
                           config.nms_threshold)
            entry["map50"] = res.map[0.5]
            entry["map75"] = res.map[0.75]
        metrics.append(entry)
        log.info("epoch %d %s", epoch, json.dumps(entry))
        if out is not None:
            with open(out / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
            if config.checkpoint_stages and epoch in stage_ends:
                save_checkpoint(model, out / f"{phase}_epoch{epoch:03d}.ckpt",
                                {"epoch": epoch, "phase": phase, "train_config": config.to_json()})
    return metrics


def evaluate(model: DetectorModel, dataset: Dataset, size: int, conf_threshold: float = 0.01,
             nms_threshold: float = 0.45) -> APResult:
    dets = [
        predict(model, dataset.load_raster(i), conf_threshold, nms_threshold, input_size=size)
        for i in range(len(dataset))
    ]
    return mean_ap(dets, dataset)


def prepare_model(dataset: Dataset, config: TrainConfig, anchors: AnchorSet | None = None) -> DetectorModel:
    if anchors is None:
        anchors = kmeans_anchors(dataset, 9, config.sizes, seed=config.seed)
    model = build_toy_detector(
        len(dataset.categories), config.width, config.norm, anchors=anchors,
        input_size=config.eval_size or max(config.sizes), categories=dataset.categories,
    )
    return init_weights(model, "xavier", seed=config.seed)


def _fresh_metrics(out_dir) -> None:
    # a new run starts its own log instead of appending to a previous one
    if out_dir is not None:
        (Path(out_dir) / "metrics.jsonl").unlink(missing_ok=True)


def train(dataset: Dataset, config: TrainConfig, val: Dataset | None = None, anchors: AnchorSet | None = None,
          out_dir: str | Path | None = None) -> TrainResult:
    _fresh_metrics(out_dir)
    model = prepare_model(dataset, config, anchors)
    metrics = train_loop(model, dataset, config, val=val, out_dir=out_dir)
    if out_dir is not None:
        save_checkpoint(model, Path(out_dir) / "final.ckpt", {"epoch": config.epochs, "train_config": config.to_json()})
    return TrainResult(model, metrics, model.anchors)


TL_MODES = ("none", "a", "b")


def tl_harness(
    target: Dataset,
    mode: str,
    config: TrainConfig,
    source: Dataset | None = None,
    donor: str | Path | dict | None = None,
    test: Dataset | None = None,
    anchors: AnchorSet | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train on ``target`` with one of the transfer-learning protocols.

    ``"none"``: Xavier init, all epochs on the target.
    ``"a"``: backbone restored from ``donor``, the rest Xavier, all epochs on the target.
    ``"b"``: (backbone from ``donor`` if given) train every layer on ``source``
    for the first 30/80 of the epochs using the *target* anchors, then restore
    the full weights and fine-tune every layer on the target for the rest.
    The learning rate follows the global epoch index across both phases.
    """
    mode = mode.lower().replace("tl-", "")
    if mode not in TL_MODES:
        raise ValueError(f"unknown transfer mode {mode!r}; expected one of {TL_MODES}")
    if mode == "a" and donor is None:
        raise ValueError("TL-A needs a donor checkpoint")
    if mode == "b" and source is None:
        raise ValueError("TL-B needs a source dataset")
    if anchors is None:
        anchors = kmeans_anchors(target, 9, config.sizes, seed=config.seed)
    out = Path(out_dir) if out_dir is not None else None
    _fresh_metrics(out)
    model = prepare_model(target, config, anchors)
    metrics: list[dict] = []
    report: dict = {"mode": mode}
    if mode == "a":
        init_weights(model, "partial", donor, seed=config.seed)
        train_loop(model, target, config, val=test, out_dir=out, phase="target", metrics=metrics)
        report["phases"] = {"target": config.epochs}
    elif mode == "b":
        if len(source.categories) != len(target.categories):
            raise ValueError(
                f"source has {len(source.categories)} categories, target {len(target.categories)}; "
                "a full restore needs equal head shapes"
            )
        if donor is not None:
            init_weights(model, "partial", donor, seed=config.seed)
        n_src, _ = tl_b_split(config.epochs)
        train_loop(model, source, config, 1, n_src, phase="source", out_dir=out, metrics=metrics)
        pretrained = {k: v.copy() for k, v in model.state_tensors().items()}
        if out is not None:
            save_checkpoint(model, out / "source_pretrained.ckpt", {"epoch": n_src, "phase": "source"})
        model = prepare_model(target, config, anchors)
        init_weights(model, "full", pretrained)
        train_loop(model, target, config, n_src + 1, config.epochs, phase="target", val=test, out_dir=out,
                   metrics=metrics)
        report["phases"] = {"source": n_src, "target": config.epochs - n_src}
    else:
        train_loop(model, target, config, val=test, out_dir=out, phase="target", metrics=metrics)
        report["phases"] = {"target": config.epochs}
    if test is not None:
        res = evaluate(model, test, config.eval_size or max(config.sizes), config.conf_threshold,
                       config.nms_threshold)
        report["map50"], report["map75"] = res.map[0.5], res.map[0.75]
    if out is not None:
        save_checkpoint(model, out / "final.ckpt", {"epoch": config.epochs, "tl": mode, "train_config": config.to_json()})
    return TrainResult(model, metrics, anchors, report)
