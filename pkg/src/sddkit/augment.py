"""Training-time augmentation of rasters together with their boxes.

The pipeline applies, in order: a random scale-and-crop (p = 1/2), one flip
(p = 1/3, axis chosen uniformly), one photometric operation (p = 1/4, chosen
uniformly among motion blur, lightness shift and salt-and-pepper noise), and
finally letterboxes to the square training size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

from .geometry import LetterboxTransform, letterbox_transform

PAD_VALUE = 128
MAX_CROP_TRIES = 20


@dataclass
class Sample:
    raster: np.ndarray  # (H, W, 3) uint8, RGB
    boxes: np.ndarray  # (n, 4) corner-form pixels
    categories: np.ndarray  # (n,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    @property
    def height(self) -> int:
        return self.raster.shape[0]


@dataclass
class AugmentConfig:
    p_geom: float = 1 / 2
    p_flip: float = 1 / 3
    p_photo: float = 1 / 4
    crop_scale: tuple[float, float] = (0.6, 1.0)
    blur_length: tuple[int, int] = (3, 15)
    blur_angle: tuple[float, float] = (0.0, 180.0)
    brightness: tuple[float, float] = (-0.3, 0.3)
    noise_density: tuple[float, float] = (0.005, 0.03)
    target_size: int = 416
    pad_value: int = PAD_VALUE
    seed: int = 0

    def __post_init__(self):
        for name in ("p_geom", "p_flip", "p_photo"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for name in ("crop_scale", "blur_length", "blur_angle", "brightness", "noise_density"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")

    def disabled(self) -> "AugmentConfig":
        return replace(self, p_geom=0.0, p_flip=0.0, p_photo=0.0)


@dataclass
class AugmentLog:
    geom: bool = False
    flip: str | None = None
    photo: str | None = None
    params: dict = field(default_factory=dict)


def rng_for(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (master seed, record index)."""
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# geometric ops


def letterbox_raster(raster: np.ndarray, target: int, pad_value: int = PAD_VALUE):
    h, w = raster.shape[:2]
    tf = letterbox_transform(w, h, target)
    nw, nh = tf.resized_w, tf.resized_h
    if (nw, nh) == (w, h):
        resized = raster
    else:
        interp = cv2.INTER_AREA if tf.scale < 1 else cv2.INTER_LINEAR
        resized = cv2.resize(raster, (nw, nh), interpolation=interp)
    out = np.full((target, target, 3), pad_value, dtype=np.uint8)
    out[tf.pad_y : tf.pad_y + nh, tf.pad_x : tf.pad_x + nw] = resized
    return out, tf


def letterbox(sample: Sample, target: int, pad_value: int = PAD_VALUE) -> tuple[Sample, LetterboxTransform]:
    raster, tf = letterbox_raster(sample.raster, target, pad_value)
    boxes = tf.apply_array(sample.boxes)
    boxes = np.clip(boxes, 0, target)
    return Sample(raster, boxes, sample.categories.copy()), tf


def scale_crop(sample: Sample, scale: float, origin: tuple[int, int]) -> Sample | None:
    """Crop a ``scale``-sized window at ``origin`` (x, y).

    Returns ``None`` when the window does not fully contain every box.
    """
    cw = max(1, int(round(sample.width * scale)))
    ch = max(1, int(round(sample.height * scale)))
    x0, y0 = int(origin[0]), int(origin[1])
    if x0 < 0 or y0 < 0 or x0 + cw > sample.width or y0 + ch > sample.height:
        raise ValueError(f"crop window {cw}x{ch} at {origin} outside {sample.width}x{sample.height}")
    b = sample.boxes
    if len(b) and not (
        (b[:, 0] >= x0).all() and (b[:, 1] >= y0).all()
        and (b[:, 2] <= x0 + cw).all() and (b[:, 3] <= y0 + ch).all()
    ):
        return None
    raster = sample.raster[y0 : y0 + ch, x0 : x0 + cw].copy()
    return Sample(raster, b - np.array([x0, y0, x0, y0], dtype=np.float64), sample.categories.copy())


def random_scale_crop(sample: Sample, rng: np.random.Generator, scale_range=(0.6, 1.0),
                      max_tries: int = MAX_CROP_TRIES) -> tuple[Sample, dict]:
    for attempt in range(max_tries):
        scale = float(rng.uniform(*scale_range))
        cw = max(1, int(round(sample.width * scale)))
        ch = max(1, int(round(sample.height * scale)))
        x0 = int(rng.integers(0, sample.width - cw + 1))
        y0 = int(rng.integers(0, sample.height - ch + 1))
        out = scale_crop(sample, scale, (x0, y0))
        if out is not None:
            return out, {"scale": scale, "origin": (x0, y0), "tries": attempt + 1}
    return sample, {"scale": 1.0, "origin": (0, 0), "tries": max_tries, "fallback": True}


def flip(sample: Sample, axis: str = "horizontal") -> Sample:
    b = sample.boxes.copy()
    if axis == "horizontal":
        raster = sample.raster[:, ::-1]
        w = sample.width
        b[:, [0, 2]] = w - sample.boxes[:, [2, 0]]
    elif axis == "vertical":
        raster = sample.raster[::-1]
        h = sample.height
        b[:, [1, 3]] = h - sample.boxes[:, [3, 1]]
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    return Sample(np.ascontiguousarray(raster), b, sample.categories.copy())


# ---------------------------------------------------------------------------
# photometric ops


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Integer line kernel: hit counts of a rasterised centred line.

    ``length`` samples spaced one pixel apart along direction ``angle``
    (degrees, counter-clockwise from +x) are rounded to the nearest pixel.
    Counts sum to ``length``; divide by ``length`` for the normalised kernel.
    """
    length = int(length)
    if length < 1:
        raise ValueError(f"blur length must be >= 1, got {length}")
    theta = math.radians(angle)
    t = np.arange(length) - (length - 1) / 2
    dx = np.rint(t * math.cos(theta)).astype(int)
    dy = np.rint(-t * math.sin(theta)).astype(int)
    r = max(np.abs(dx).max(), np.abs(dy).max())
    counts = np.zeros((2 * r + 1, 2 * r + 1), dtype=np.int64)
    np.add.at(counts, (dy + r, dx + r), 1)
    return counts


def motion_blur(raster: np.ndarray, length: int, angle: float) -> np.ndarray:
    """Linear motion blur with clamp-to-edge borders."""
    counts = motion_blur_kernel(length, angle)
    if counts.size == 1:
        return raster.copy()
    r = counts.shape[0] // 2
    h, w = raster.shape[:2]
    padded = np.pad(raster.astype(np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
    acc = np.zeros((h, w, raster.shape[2]), dtype=np.float64)
    for ky, kx in zip(*np.nonzero(counts)):
        acc += counts[ky, kx] * padded[ky : ky + h, kx : kx + w]
    return np.clip(np.rint(acc / counts.sum()), 0, 255).astype(np.uint8)


def rgb_to_hls(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``colorsys.rgb_to_hls`` on floats in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    l = (minc + maxc) / 2.0
    span = maxc - minc
    chroma = span > 0
    safe = np.where(chroma, span, 1.0)
    s = np.where(l <= 0.5, span / np.where(chroma, maxc + minc, 1.0), span / np.where(chroma, 2.0 - maxc - minc, 1.0))
    s = np.where(chroma, s, 0.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(chroma, (h / 6.0) % 1.0, 0.0)
    return h, l, s


def _hue_channel(m1, m2, hue):
    hue = hue % 1.0
    return np.where(
        hue < 1 / 6, m1 + (m2 - m1) * hue * 6.0,
        np.where(hue < 0.5, m2, np.where(hue < 2 / 3, m1 + (m2 - m1) * (2 / 3 - hue) * 6.0, m1)),
    )


def hls_to_rgb(h: np.ndarray, l: np.ndarray, s: np.ndarray) -> np.ndarray:
    m2 = np.where(l <= 0.5, l * (1.0 + s), l + s - l * s)
    m1 = 2.0 * l - m2
    rgb = np.stack(
        [_hue_channel(m1, m2, h + 1 / 3), _hue_channel(m1, m2, h), _hue_channel(m1, m2, h - 1 / 3)], axis=-1
    )
    gray = (s == 0)[..., None]
    return np.where(gray, l[..., None], rgb)


def brightness_hls(raster: np.ndarray, delta: float) -> np.ndarray:
    """Shift HLS lightness by ``delta`` (fraction of full lightness)."""
    if not -1.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [-1, 1], got {delta}")
    h, l, s = rgb_to_hls(raster.astype(np.float64) / 255.0)
    l = np.clip(l + delta, 0.0, 1.0)
    return np.clip(np.rint(hls_to_rgb(h, l, s) * 255.0), 0, 255).astype(np.uint8)


def salt_pepper(raster: np.ndarray, density: float, rng: np.random.Generator | int) -> np.ndarray:
    """Set each pixel, with probability ``density``, to black or white (equal odds)."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    h, w = raster.shape[:2]
    hit = rng.random((h, w)) < density
    white = rng.random((h, w)) < 0.5
    out = raster.copy()
    out[hit & white] = 255
    out[hit & ~white] = 0
    return out


PHOTO_OPS = ("blur", "brightness", "noise")


def augment_pipeline(sample: Sample, config: AugmentConfig, rng: np.random.Generator):
    """Augment one sample and letterbox it to ``config.target_size``.

    Returns ``(sample, log)``; boxes follow every step.
    """
    log = AugmentLog()
    if rng.random() < config.p_geom:
        sample, info = random_scale_crop(sample, rng, config.crop_scale)
        log.geom = True
        log.params["crop"] = info
    if rng.random() < config.p_flip:
        axis = "horizontal" if rng.random() < 0.5 else "vertical"
        sample = flip(sample, axis)
        log.flip = axis
    if rng.random() < config.p_photo:
        op = PHOTO_OPS[int(rng.integers(3))]
        log.photo = op
        if op == "blur":
            length = int(rng.integers(config.blur_length[0], config.blur_length[1] + 1))
            angle = float(rng.uniform(*config.blur_angle))
            raster = motion_blur(sample.raster, length, angle)
            log.params["blur"] = (length, angle)
        elif op == "brightness":
            delta = float(rng.uniform(*config.brightness))
            raster = brightness_hls(sample.raster, delta)
            log.params["brightness"] = delta
        else:
            density = float(rng.uniform(*config.noise_density))
            raster = salt_pepper(sample.raster, density, rng)
            log.params["noise"] = density
        sample = Sample(raster, sample.boxes, sample.categories)
    out, _ = letterbox(sample, config.target_size, config.pad_value)
    return out, log


def draw_boxes(raster: np.ndarray, boxes, labels=None, color=(255, 0, 0)) -> np.ndarray:
    """Copy of ``raster`` with rectangles (and optional text labels) drawn."""
    out = np.ascontiguousarray(raster.copy())
    for i, b in enumerate(np.asarray(boxes).reshape(-1, 4)):
        p1 = (int(round(b[0])), int(round(b[1])))
        p2 = (int(round(b[2])), int(round(b[3])))
        cv2.rectangle(out, p1, p2, color, 1)
        if labels is not None:
            cv2.putText(out, str(labels[i]), (p1[0], max(p1[1] - 2, 8)), cv2.FONT_HERSHEY_SIMPLEX, 0.3, color, 1)
    return out


def write_png(path, raster: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(raster[:, :, ::-1])):
        raise OSError(f"failed to write {path}")
