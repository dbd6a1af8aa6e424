"""Toy residual backbone with an FPN-style neck and three detection heads."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .anchors import LEVEL_STRIDES, AnchorSet
from .dataset import DEFAULT_CATEGORIES
from .head import SLOTS
from .nn.checkpoint import CheckpointError, load_tensors, save_tensors
from .nn.layers import (
    Conv2d,
    ConvBlock,
    Layer,
    Norm,
    ResidualUnit,
    Sequential,
    Upsample2x,
    set_dtype,
)


class Backbone(Layer):
    """Stem plus four stride-2 stages; returns features at strides 8, 16, 32."""

    def __init__(self, base: int, norm: str, depths=(1, 2, 2, 1)):
        c = base
        self.stem = ConvBlock(3, c, 3, 2, norm)
        self.stages = []
        cin = c
        for depth in depths:
            cout = cin * 2
            units = [ConvBlock(cin, cout, 3, 2, norm)] + [ResidualUnit(cout, norm) for _ in range(depth)]
            self.stages.append(Sequential(*units))
            cin = cout
        self.out_channels = (4 * c, 8 * c, 16 * c)

    def forward(self, x, train=True):
        x = self.stem.forward(x, train)
        feats = []
        for stage in self.stages:
            x = stage.forward(x, train)
            feats.append(x)
        return feats[1], feats[2], feats[3]

    def backward(self, d8, d16, d32):
        dx = self.stages[3].backward(d32)
        dx = self.stages[2].backward(dx + d16)
        dx = self.stages[1].backward(dx + d8)
        dx = self.stages[0].backward(dx)
        return self.stem.backward(dx)


class Neck(Layer):
    """Top-down pathway merging levels by channel concatenation."""

    def __init__(self, channels: tuple[int, int, int], norm: str):
        c8, c16, c32 = channels
        self.lateral32 = ConvBlock(c32, c32 // 2, 1, 1, norm)
        self.reduce32 = ConvBlock(c32 // 2, c16 // 2, 1, 1, norm)
        self.up32 = Upsample2x()
        self.lateral16 = ConvBlock(c16 // 2 + c16, c16 // 2, 1, 1, norm)
        self.reduce16 = ConvBlock(c16 // 2, c8 // 2, 1, 1, norm)
        self.up16 = Upsample2x()
        self.lateral8 = ConvBlock(c8 // 2 + c8, c8 // 2, 1, 1, norm)
        self.out_channels = (c8 // 2, c16 // 2, c32 // 2)
        self._split = (c16 // 2, c8 // 2)

    def forward(self, f8, f16, f32, train=True):
        p32 = self.lateral32.forward(f32, train)
        u = self.up32.forward(self.reduce32.forward(p32, train), train)
        p16 = self.lateral16.forward(np.concatenate([u, f16], axis=-1), train)
        u = self.up16.forward(self.reduce16.forward(p16, train), train)
        p8 = self.lateral8.forward(np.concatenate([u, f8], axis=-1), train)
        return p8, p16, p32

    def backward(self, d8, d16, d32):
        s16, s8 = self._split
        dcat8 = self.lateral8.backward(d8)
        du, df8 = dcat8[..., :s8], dcat8[..., s8:]
        d16 = d16 + self.reduce16.backward(self.up16.backward(du))
        dcat16 = self.lateral16.backward(d16)
        du, df16 = dcat16[..., :s16], dcat16[..., s16:]
        d32 = d32 + self.reduce32.backward(self.up32.backward(du))
        df32 = self.lateral32.backward(d32)
        return df8, df16, df32


class DetectorModel(Layer):
    def __init__(self, num_classes: int = 4, width: int = 1, norm: str = "bn",
                 anchors: AnchorSet | None = None, input_size: int = 128,
                 categories: tuple[str, ...] = DEFAULT_CATEGORIES, base_channels: int = 8,
                 depths=(1, 2, 2, 1)):
        if width < 1:
            raise ValueError(f"width multiplier must be >= 1, got {width}")
        self.num_classes = num_classes
        self.width = width
        self.norm_mode = norm
        self.base_channels = base_channels
        self.depths = tuple(depths)
        self.anchors = anchors
        self.input_size = input_size
        self.categories = tuple(categories)
        self.backbone = Backbone(base_channels * width, norm, depths)
        self.neck = Neck(self.backbone.out_channels, norm)
        out = SLOTS * (5 + num_classes)
        self.heads = [
            Sequential(ConvBlock(c, 2 * c, 3, 1, norm), Conv2d(2 * c, out, 1, 1, bias=True))
            for c in self.neck.out_channels
        ]

    @property
    def output_channels(self) -> int:
        return SLOTS * (5 + self.num_classes)

    def forward(self, x: np.ndarray, train: bool = True) -> list[np.ndarray]:
        """Raw predictions per level (stride 8, 16, 32), each (N, H, W, 3, 5 + C)."""
        if x.shape[1] % 32 or x.shape[2] % 32:
            raise ValueError(f"input {x.shape[1]}x{x.shape[2]} is not divisible by 32")
        feats = self.backbone.forward(x, train)
        necks = self.neck.forward(*feats, train=train)
        outs = []
        for head, f in zip(self.heads, necks):
            y = head.forward(f, train)
            if not np.isfinite(y).all():
                raise FloatingPointError("non-finite values in head output")
            n, h, w, _ = y.shape
            outs.append(y.reshape(n, h, w, SLOTS, 5 + self.num_classes))
        return outs

    def backward(self, grads: list[np.ndarray]) -> np.ndarray:
        dn = []
        for head, g in zip(self.heads, grads):
            n, h, w = g.shape[:3]
            dn.append(head.backward(g.reshape(n, h, w, -1)))
        df = self.neck.backward(*dn)
        return self.backbone.backward(*df)

    def parameters(self):
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def astype(self, dtype) -> "DetectorModel":
        set_dtype(self, dtype)
        return self

    def set_norm_mode(self, mode: str) -> None:
        for norm in self.norms():
            norm.mode = mode
        self.norm_mode = mode

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.named_params()}
        out.update({name: b.value for name, b in self.named_buffers()})
        return out

    def arch(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "width": self.width,
            "norm": self.norm_mode,
            "base_channels": self.base_channels,
            "depths": list(self.depths),
            "input_size": self.input_size,
            "categories": list(self.categories),
            "anchors": None if self.anchors is None else self.anchors.to_json(),
        }

    def grid_shapes(self, input_size: int) -> list[tuple[int, int, int, int]]:
        return [
            (input_size // s, input_size // s, SLOTS, 5 + self.num_classes) for s in LEVEL_STRIDES
        ]


def build_toy_detector(num_classes: int = 4, width: int = 1, norm: str = "bn", **kwargs) -> DetectorModel:
    return DetectorModel(num_classes=num_classes, width=width, norm=norm, **kwargs)


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _xavier(model: DetectorModel, rng: np.random.Generator) -> None:
    for layer in _walk(model):
        if isinstance(layer, Conv2d):
            w = layer.weight
            w.value = xavier_uniform(w.value.shape, layer.fan_in, layer.fan_out, rng, w.value.dtype)
            if layer.bias is not None:
                layer.bias.value[...] = 0
        elif isinstance(layer, Norm):
            layer.gamma.value[...] = 1
            layer.beta.value[...] = 0
            layer.moving_mean.value[...] = 0
            layer.moving_var.value[...] = 1


def _walk(layer: Layer):
    yield layer
    for _, child in layer._children():
        yield from _walk(child)


def init_weights(model: DetectorModel, scheme: str = "xavier", checkpoint: str | Path | dict | None = None,
                 seed: int = 0) -> DetectorModel:
    """Initialise ``model`` in place.

    ``"xavier"``: uniform in +-sqrt(6 / (fan_in + fan_out)) for every conv.
    ``"partial"``: backbone tensors restored from ``checkpoint``, the rest Xavier.
    ``"full"``: every tensor restored from ``checkpoint``.
    """
    rng = np.random.default_rng(seed)
    if scheme == "xavier":
        _xavier(model, rng)
        return model
    if scheme not in ("partial", "full"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if checkpoint is None:
        raise ValueError(f"init scheme {scheme!r} needs a checkpoint")
    tensors = checkpoint if isinstance(checkpoint, dict) else load_tensors(checkpoint)[0]
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    targets = {**params, **buffers}
    if scheme == "partial":
        names = [k for k in targets if k.startswith("backbone.")]
        _xavier(model, rng)
    else:
        names = list(targets)
    for name in names:
        if name not in tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r}")
        src = tensors[name]
        dst = targets[name]
        if tuple(src.shape) != tuple(dst.value.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(src.shape)} vs model {tuple(dst.value.shape)}"
            )
        dst.value = np.array(src, dtype=dst.value.dtype)
    return model


def save_checkpoint(model: DetectorModel, path: str | Path, extra: dict | None = None) -> None:
    meta = {"arch": model.arch()}
    if extra:
        meta.update(extra)
    save_tensors(path, model.state_tensors(), meta)


def load_checkpoint(path: str | Path) -> tuple[DetectorModel, dict]:
    tensors, meta = load_tensors(path)
    arch = meta["arch"]
    anchors = None
    if arch.get("anchors"):
        anchors = AnchorSet(np.array(arch["anchors"]["anchors"], dtype=np.float64), arch["anchors"]["levels"])
    model = DetectorModel(
        num_classes=arch["num_classes"],
        width=arch["width"],
        norm=arch["norm"],
        anchors=anchors,
        input_size=arch["input_size"],
        categories=tuple(arch["categories"]),
        base_channels=arch["base_channels"],
        depths=tuple(arch["depths"]),
    )
    init_weights(model, "full", tensors)
    return model, meta
