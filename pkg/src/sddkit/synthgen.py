"""Deterministic synthetic damage-like datasets.

Four archetypes are drawn on noisy gray backgrounds: thin polylines
(crack-like), small round blobs (pop-out-like), irregular textured patches
(spalling-like) and striped patches (rebar-like). Boxes are the tight
extent of each drawn object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .augment import write_png
from .dataset import DEFAULT_CATEGORIES, Dataset, ImageRecord, ObjectLabel, save_jsonl
from .geometry import Box, iou_matrix

# Object fractions per category: crack, pop-out, spalling, exposed rebar.
DAMAGE_MIX = (0.35, 0.15, 0.13, 0.37)
MAX_PLACEMENT_TRIES = 50


@dataclass
class ObjectSpec:
    archetype: str  # "line" | "blob" | "patch" | "stripes"
    rel_area: tuple[float, float]  # log-uniform range of box area / image area
    aspect: tuple[float, float]  # log-uniform range of the long/short side ratio
    vertical_prob: float = 0.5  # chance the long side is vertical
    color: tuple[int, int, int] = (60, 60, 60)


TARGET_SPECS = (
    ObjectSpec("line", (0.004, 0.03), (5.0, 12.0), 0.4, (35, 35, 38)),
    ObjectSpec("blob", (0.003, 0.015), (1.0, 1.3), 0.5, (225, 222, 215)),
    ObjectSpec("patch", (0.02, 0.08), (1.0, 1.6), 0.5, (95, 88, 80)),
    ObjectSpec("stripes", (0.02, 0.1), (1.5, 4.0), 0.5, (170, 80, 40)),
)

SOURCE_CATEGORIES = ("bar", "disc", "blotch", "grille")
SOURCE_SPECS = (
    ObjectSpec("line", (0.002, 0.06), (3.0, 16.0), 0.5, (20, 40, 120)),
    ObjectSpec("blob", (0.002, 0.05), (1.0, 1.6), 0.5, (240, 200, 60)),
    ObjectSpec("patch", (0.01, 0.15), (1.0, 2.0), 0.5, (60, 110, 60)),
    ObjectSpec("stripes", (0.01, 0.15), (1.2, 5.0), 0.5, (120, 60, 140)),
)


@dataclass
class SynthConfig:
    n_images: int = 100
    image_size: int = 128
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    mix: tuple[float, ...] = DAMAGE_MIX
    specs: tuple[ObjectSpec, ...] = TARGET_SPECS
    objects_per_image: tuple[int, int] = (1, 3)
    background_level: tuple[int, int] = (120, 190)
    background_noise: float = 12.0
    max_overlap: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(sum(self.mix), 1.0, abs_tol=1e-9):
            raise ValueError(f"category mix must sum to 1, got {sum(self.mix)}")
        if not (len(self.mix) == len(self.specs) == len(self.categories)):
            raise ValueError("categories, mix and specs must have equal length")
        if self.objects_per_image[0] < 1 or self.objects_per_image[0] > self.objects_per_image[1]:
            raise ValueError(f"invalid objects_per_image {self.objects_per_image}")


def preset(name: str, n_images: int = 100, image_size: int = 128, seed: int = 0) -> SynthConfig:
    """``"target"``: damage-like mix; ``"source"``: broader scale range, other looks."""
    if name == "target":
        return SynthConfig(n_images=n_images, image_size=image_size, seed=seed)
    if name == "source":
        return SynthConfig(
            n_images=n_images,
            image_size=image_size,
            categories=SOURCE_CATEGORIES,
            mix=(0.25, 0.25, 0.25, 0.25),
            specs=SOURCE_SPECS,
            objects_per_image=(1, 4),
            seed=seed,
        )
    raise ValueError(f"unknown preset {name!r}; expected 'target' or 'source'")


def _background(rng: np.random.Generator, size: int, cfg: SynthConfig) -> np.ndarray:
    level = rng.uniform(*cfg.background_level)
    tint = rng.uniform(-8, 8, size=3)
    coarse = rng.normal(0, cfg.background_noise, size=(size // 8 + 1, size // 8 + 1)).astype(np.float32)
    coarse = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    fine = rng.normal(0, cfg.background_noise / 2, size=(size, size, 3))
    img = level + tint + coarse[..., None] + fine
    return np.clip(img, 0, 255)


def _sample_box(rng, spec: ObjectSpec, size: int) -> tuple[int, int, int, int] | None:
    area = math.exp(rng.uniform(math.log(spec.rel_area[0]), math.log(spec.rel_area[1]))) * size * size
    ratio = math.exp(rng.uniform(math.log(spec.aspect[0]), math.log(spec.aspect[1])))
    long_side = math.sqrt(area * ratio)
    short_side = math.sqrt(area / ratio)
    if rng.random() < spec.vertical_prob:
        w, h = short_side, long_side
    else:
        w, h = long_side, short_side
    w, h = max(3, int(round(w))), max(3, int(round(h)))
    if w > size - 2 or h > size - 2:
        return None
    x0 = int(rng.integers(1, size - w))
    y0 = int(rng.integers(1, size - h))
    return x0, y0, w, h


def _draw(rng, spec: ObjectSpec, img: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    """Paint one object into ``img`` (float, in place) and return its mask."""
    size = img.shape[0]
    mask = np.zeros((size, size), dtype=np.uint8)
    color = np.array(spec.color, dtype=np.float64) + rng.uniform(-12, 12, size=3)
    if spec.archetype == "line":
        horizontal = w >= h
        length, span = (w, h) if horizontal else (h, w)
        n = max(3, length // 6)
        t = np.linspace(0, length - 1, n)
        wiggle = np.cumsum(rng.normal(0, 1.0, size=n))
        wiggle = (wiggle - wiggle.min()) / max(np.ptp(wiggle), 1e-9) * (span - 1)
        if horizontal:
            pts = np.stack([x0 + t, y0 + wiggle], axis=1)
        else:
            pts = np.stack([x0 + wiggle, y0 + t], axis=1)
        thickness = 1 if span < 6 else 2
        cv2.polylines(mask, [np.rint(pts).astype(np.int32)], False, 1, thickness)
        # a thick stroke overshoots the box by a pixel; trim it back
        inside = np.zeros_like(mask)
        inside[y0 : y0 + h, x0 : x0 + w] = 1
        mask &= inside
        img[mask > 0] = color
    elif spec.archetype == "blob":
        # ellipse inscribed in the box, tested at pixel centres, so the
        # tight extent equals the sampled box
        ys, xs = np.mgrid[y0 : y0 + h, x0 : x0 + w]
        u = (xs + 0.5 - (x0 + w / 2)) / (w / 2)
        v = (ys + 0.5 - (y0 + h / 2)) / (h / 2)
        mask[y0 : y0 + h, x0 : x0 + w] = (u * u + v * v <= 1.0).astype(np.uint8)
        img[mask > 0] = color
        rim = mask - cv2.erode(mask, np.ones((3, 3), np.uint8))
        img[rim > 0] = color * 0.45
    elif spec.archetype == "patch":
        k = int(rng.integers(7, 12))
        # one vertex on each side of the box keeps the tight extent equal to it
        ang = np.concatenate([rng.uniform(0, 2 * np.pi, size=k), np.arange(4) * np.pi / 2])
        rad = np.concatenate([rng.uniform(0.6, 1.0, size=k), np.full(4, 1.0)])
        order = np.argsort(ang)
        ang, rad = ang[order], rad[order]
        pts = np.stack(
            [x0 + w / 2 + rad * np.cos(ang) * (w / 2), y0 + h / 2 + rad * np.sin(ang) * (h / 2)], axis=1
        )
        pts[:, 0] = np.clip(pts[:, 0], x0, x0 + w - 1)
        pts[:, 1] = np.clip(pts[:, 1], y0, y0 + h - 1)
        cv2.fillPoly(mask, [np.rint(pts).astype(np.int32)], 1)
        sel = mask > 0
        img[sel] = color + rng.normal(0, 18, size=(int(sel.sum()), 1))
    elif spec.archetype == "stripes":
        mask[y0 : y0 + h, x0 : x0 + w] = 1
        img[y0 : y0 + h, x0 : x0 + w] = color * 0.35
        horizontal = w >= h
        across = h if horizontal else w
        n_bars = max(2, min(4, across // 4))
        for b in range(n_bars):
            pos = int(round((b + 0.5) * across / n_bars))
            thick = max(1, across // (2 * n_bars))
            lo, hi = pos - thick // 2, pos - thick // 2 + thick
            if horizontal:
                img[y0 + max(lo, 0) : y0 + min(hi, h), x0 : x0 + w] = color
            else:
                img[y0 : y0 + h, x0 + max(lo, 0) : x0 + min(hi, w)] = color
    else:
        raise ValueError(f"unknown archetype {spec.archetype!r}")
    return mask


def _tight_box(mask: np.ndarray) -> Box | None:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def generate_image(cfg: SynthConfig, index: int) -> tuple[np.ndarray, list[ObjectLabel]]:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    img = _background(rng, size, cfg)
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    cats = rng.choice(len(cfg.mix), size=n_obj, p=np.asarray(cfg.mix))
    labels: list[ObjectLabel] = []
    for cat in cats:
        spec = cfg.specs[int(cat)]
        for _ in range(MAX_PLACEMENT_TRIES):
            placed = _sample_box(rng, spec, size)
            if placed is None:
                continue
            x0, y0, w, h = placed
            cand = np.array([[x0, y0, x0 + w, y0 + h]], dtype=np.float64)
            if labels and iou_matrix(cand, np.array([lb.box for lb in labels])).max() > cfg.max_overlap:
                continue
            box = _tight_box(_draw(rng, spec, img, x0, y0, w, h))
            if box is not None and box.area > 0:
                labels.append(ObjectLabel(int(cat), box))
                break
        else:
            raise RuntimeError(
                f"image {index}: could not place a {cfg.categories[int(cat)]} object "
                f"after {MAX_PLACEMENT_TRIES} tries"
            )
    return np.rint(img).astype(np.uint8), labels


def generate(cfg: SynthConfig) -> Dataset:
    """Dataset with inline rasters (``record.raster``) named ``synth_XXXXX.png``."""
    records = []
    for i in range(cfg.n_images):
        raster, labels = generate_image(cfg, i)
        records.append(
            ImageRecord(f"synth_{i:05d}.png", cfg.image_size, cfg.image_size, labels, raster=raster)
        )
    return Dataset(records, cfg.categories)


def save_dataset(dataset: Dataset, out_dir: str | Path, name: str = "dataset.jsonl") -> Path:
    """Write every inline raster as PNG next to a JSONL index; returns the index path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(dataset.records):
        write_png(out_dir / rec.image, dataset.load_raster(i))
    path = out_dir / name
    save_jsonl(dataset, path)
    return path
