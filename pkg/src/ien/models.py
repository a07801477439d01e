"""Declarative model construction: layer specs, per-conv feature-group
layouts (homogeneous or mixed sizes), the desk-scale 6-conv preset, and the
channel arithmetic that mixed layouts imply.

Layout grammar:  "R4"  (homogeneous, groups of 4)
                 "R4 @ 1.0"
                 "R8-4-2-1 @ 0.5/0.25/0.125/0.125"   (fractions of the base
                 group count assigned to each size, largest first)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ien.layers import (
    BatchNormLayer,
    ConvLayer,
    GroupLayout,
    LinearLayer,
    batchnorm2d,
    conv2d,
    global_avg_pool,
    group_pool,
    linear,
    maxpool2d,
    relu,
)
from ien.tensor import DTYPES, Tensor

LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "gap", "linear", "monitor")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    stride: int = 1
    padding: int = 0
    channels: int = 0          # conv/linear output width; 0 = derive
    layout: Optional[GroupLayout] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int]       # (C, H, W)
    classes: int
    base_groups: int
    layers: tuple[LayerSpec, ...]
    dtype: str = "f32"

    def tap_names(self) -> list[str]:
        """Monitor taps in order, named after the conv they follow."""
        names, conv_i = [], 0
        for spec in self.layers:
            if spec.kind == "conv":
                conv_i += 1
            elif spec.kind == "monitor":
                names.append(f"conv{conv_i}")
        return names


# ---------------------------------------------------------------------------
# layout grammar


def parse_layout(text: str, base_groups: int) -> GroupLayout:
    """Parse a layout string; `base_groups` is the group count a homogeneous
    layer would carry."""
    body = text.strip().replace(" ", "")
    if not body.startswith("R"):
        raise ValueError(f"layout must start with 'R', got {text!r}")
    if "@" in body:
        sizes_part, frac_part = body.split("@", 1)
        fractions = [float(p) for p in frac_part.split("/")]
    else:
        sizes_part, fractions = body, [1.0]
    sizes = [int(p) for p in sizes_part[1:].split("-")]
    if len(sizes) != len(fractions):
        raise ValueError(f"{len(sizes)} sizes but {len(fractions)} fractions in {text!r}")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1, in {text!r}")
    order = sizes[0]
    runs = []
    for size, frac in zip(sizes, fractions):
        if size < 1 or order % size != 0:
            raise ValueError(f"group size {size} does not divide order {order} in {text!r}")
        count_f = frac * base_groups
        count = round(count_f)
        if abs(count_f - count) > 1e-9 or count < 0:
            raise ValueError(f"fraction {frac} of {base_groups} groups is not an "
                             f"integer in {text!r}")
        if count > 0:
            runs.append((size, count))
    if not runs:
        raise ValueError(f"layout {text!r} has no groups")
    return GroupLayout(order, tuple(runs))


def serialize_layout(layout: GroupLayout, base_groups: int) -> str:
    if layout.groups == ((layout.order, base_groups),):
        return f"R{layout.order}"
    sizes = "-".join(str(size) for size, _ in layout.groups)
    fracs = "/".join(f"{count / base_groups:g}" for _, count in layout.groups)
    return f"R{sizes} @ {fracs}"


def channel_fraction(layout: GroupLayout, base_groups: int) -> float:
    """Channel count relative to a homogeneous layer of the same order."""
    return layout.total_channels / (base_groups * layout.order)


def pooled_channel_count(config: ModelConfig) -> list[int]:
    """Pooled-map channel width at each conv layer, in conv order."""
    counts = []
    for spec in config.layers:
        if spec.kind == "conv":
            if spec.layout is not None:
                counts.append(spec.layout.pooled_channels)
            else:
                counts.append(spec.channels)
    return counts


# ---------------------------------------------------------------------------
# canonical serialization + hash


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_model_text(config: ModelConfig) -> str:
    parts = [
        "input=" + "x".join(str(d) for d in config.input_shape),
        f"classes={config.classes}",
        f"base_groups={config.base_groups}",
        f"dtype={config.dtype}",
    ]
    rendered = []
    for spec in config.layers:
        if spec.kind == "conv":
            lt = serialize_layout(spec.layout, config.base_groups) if spec.layout else "-"
            rendered.append(f"conv(k={spec.k},s={spec.stride},p={spec.padding},"
                            f"c={spec.channels},layout={lt.replace(' ', '')})")
        elif spec.kind == "maxpool":
            rendered.append(f"maxpool(k={spec.k},s={spec.stride})")
        elif spec.kind == "linear":
            rendered.append(f"linear(c={spec.channels})")
        else:
            rendered.append(spec.kind)
    parts.append("arch=[" + ";".join(rendered) + "]")
    return "|".join(parts)


def config_hash(config: ModelConfig) -> int:
    return fnv1a64(canonical_model_text(config))


# ---------------------------------------------------------------------------
# model


class Model:
    """Instantiated layer stack. Forward optionally collects group-pooled
    maps at each monitor tap (the side branch the equivariance loss reads)."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.mode = "train"
        self.items: list[tuple] = []         # (kind, payload)
        self.tap_layouts: dict[int, GroupLayout] = {}
        self._build(seed)

    # -- construction

    def _build(self, seed: int) -> None:
        cfg = self.config
        np_dtype = DTYPES[cfg.dtype]
        gen = np.random.Generator(np.random.PCG64(seed))
        c, h, w = cfg.input_shape
        conv_i = bn_i = lin_i = 0
        tap_i = 0
        last_layout: Optional[GroupLayout] = None
        flat: Optional[int] = None

        for li, spec in enumerate(cfg.layers):
            where = f"layer {li} ({spec.kind})"
            if spec.kind == "conv":
                if flat is not None:
                    raise ValueError(f"{where}: conv after the flattening head")
                layout = spec.layout
                out_c = spec.channels
                if layout is not None:
                    if out_c and out_c != layout.total_channels:
                        raise ValueError(
                            f"{where}: channels {out_c} != layout total "
                            f"{layout.total_channels}")
                    out_c = layout.total_channels
                elif not out_c:
                    raise ValueError(f"{where}: conv needs a layout or explicit channels")
                fan_in = c * spec.k * spec.k
                weight = Tensor(gen.normal(0.0, math.sqrt(2.0 / fan_in),
                                           size=(out_c, c, spec.k, spec.k)).astype(np_dtype),
                                requires_grad=True, name=f"conv{conv_i + 1}.weight")
                bias = Tensor(np.zeros(out_c, dtype=np_dtype), requires_grad=True,
                              name=f"conv{conv_i + 1}.bias")
                layer = ConvLayer(weight=weight, bias=bias, stride=spec.stride,
                                  padding=spec.padding)
                h_out = (h + 2 * spec.padding - spec.k) // spec.stride + 1
                w_out = (w + 2 * spec.padding - spec.k) // spec.stride + 1
                if h_out < 1 or w_out < 1:
                    raise ValueError(f"{where}: non-positive spatial extent "
                                     f"({h_out}x{w_out})")
                c, h, w = out_c, h_out, w_out
                conv_i += 1
                last_layout = layout
                self.items.append(("conv", layer))
            elif spec.kind == "bn":
                if flat is not None:
                    raise ValueError(f"{where}: bn after the flattening head")
                bn = BatchNormLayer.create(c, dtype=cfg.dtype)
                bn.gamma.name = f"bn{bn_i + 1}.gamma"
                bn.beta.name = f"bn{bn_i + 1}.beta"
                bn_i += 1
                self.items.append(("bn", bn))
            elif spec.kind == "relu":
                self.items.append(("relu", None))
            elif spec.kind == "maxpool":
                h_out = (h - spec.k) // spec.stride + 1
                w_out = (w - spec.k) // spec.stride + 1
                if h_out < 1 or w_out < 1:
                    raise ValueError(f"{where}: non-positive pooled extent")
                h, w = h_out, w_out
                self.items.append(("maxpool", (spec.k, spec.stride)))
            elif spec.kind == "monitor":
                if last_layout is None:
                    raise ValueError(f"{where}: monitor with no group layout attached")
                if last_layout.total_channels != c:
                    raise ValueError(f"{where}: layout total {last_layout.total_channels} "
                                     f"!= current channels {c}")
                self.tap_layouts[tap_i] = last_layout
                self.items.append(("monitor", tap_i))
                tap_i += 1
            elif spec.kind == "gap":
                self.items.append(("gap", None))
                flat = c
            elif spec.kind == "linear":
                if flat is None:
                    raise ValueError(f"{where}: linear before any flattening (add gap)")
                out_d = spec.channels or cfg.classes
                weight = Tensor(gen.normal(0.0, math.sqrt(2.0 / flat),
                                           size=(flat, out_d)).astype(np_dtype),
                                requires_grad=True, name=f"linear{lin_i + 1}.weight")
                bias = Tensor(np.zeros(out_d, dtype=np_dtype), requires_grad=True,
                              name=f"linear{lin_i + 1}.bias")
                lin_i += 1
                flat = out_d
                self.items.append(("linear", LinearLayer(weight=weight, bias=bias)))

        self.tap_names = self.config.tap_names()

    # -- mode

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    # -- forward

    def forward(self, x: Tensor, collect: bool = False) -> tuple[Tensor, dict[int, Tensor]]:
        pooled: dict[int, Tensor] = {}
        h = x
        for kind, payload in self.items:
            if kind == "conv":
                h = conv2d(h, payload)
            elif kind == "bn":
                h = batchnorm2d(h, payload, mode=self.mode)
            elif kind == "relu":
                h = relu(h)
            elif kind == "maxpool":
                h = maxpool2d(h, payload[0], payload[1])
            elif kind == "monitor":
                if collect:
                    pooled[payload] = group_pool(h, self.tap_layouts[payload])
            elif kind == "gap":
                h = global_avg_pool(h)
            elif kind == "linear":
                h = linear(h, payload.weight, payload.bias)
        return h, pooled

    # -- parameters / state

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = []
        for kind, payload in self.items:
            if kind == "conv":
                params.append((payload.weight.name, payload.weight))
                if payload.bias is not None:
                    params.append((payload.bias.name, payload.bias))
            elif kind == "bn":
                params.append((payload.gamma.name, payload.gamma))
                params.append((payload.beta.name, payload.beta))
            elif kind == "linear":
                params.append((payload.weight.name, payload.weight))
                params.append((payload.bias.name, payload.bias))
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays: weights plus batch-norm running stats."""
        state = {name: t.data for name, t in self.parameters()}
        bn_i = 0
        for kind, payload in self.items:
            if kind == "bn":
                bn_i += 1
                state[f"bn{bn_i}.running_mean"] = payload.running_mean
                state[f"bn{bn_i}.running_var"] = payload.running_var
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
        for name, dst in own.items():
            src = arrays[name]
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {dst.shape}")
            dst[...] = src

    @property
    def hash(self) -> int:
        return config_hash(self.config)

    def conv_layers(self) -> list[ConvLayer]:
        return [payload for kind, payload in self.items if kind == "conv"]


def build_model(config: ModelConfig, seed: int) -> Model:
    return Model(config, seed)


# ---------------------------------------------------------------------------
# presets


def conv_block(k: int = 3, padding: int = 1, stride: int = 1,
               layout: Optional[GroupLayout] = None, monitor: bool = True) -> list[LayerSpec]:
    block = [
        LayerSpec("conv", k=k, stride=stride, padding=padding, layout=layout),
        LayerSpec("bn"),
        LayerSpec("relu"),
    ]
    if monitor:
        block.append(LayerSpec("monitor"))
    return block


def rot_mini_config(base_groups: int = 8, layout_text: str = "R4",
                    input_shape: tuple[int, int, int] = (1, 28, 28),
                    classes: int = 10, dtype: str = "f32") -> ModelConfig:
    """Desk-scale 6-conv stack: conv-bn-relu blocks with two 2x2 maxpools,
    a global average pool and a linear head; every conv block is monitored."""
    layout = parse_layout(layout_text, base_groups)
    layers: list[LayerSpec] = []
    layers += conv_block(layout=layout)
    layers.append(LayerSpec("maxpool", k=2, stride=2))
    layers += conv_block(layout=layout)
    layers += conv_block(layout=layout)
    layers.append(LayerSpec("maxpool", k=2, stride=2))
    layers += conv_block(layout=layout)
    layers += conv_block(layout=layout)
    layers += conv_block(layout=layout)
    layers.append(LayerSpec("gap"))
    layers.append(LayerSpec("linear"))
    return ModelConfig(input_shape=input_shape, classes=classes,
                       base_groups=base_groups, layers=tuple(layers), dtype=dtype)
