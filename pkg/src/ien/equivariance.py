"""Per-layer equivariance losses, their aggregation into the training
objective, a per-layer equivariance meter, and a hard-wired C4 network that
is exactly equivariant by construction (the zero-point of the meter scale).

The per-layer loss compares the group-pooled maps of two inputs related by
a transformation: pool(f(transformed x)) against transformed pool(f(x)),
as a masked mean-squared error. Summed over non-identity elements and
beta-weighted over monitored layers it becomes the network loss; alpha
weights combine one such loss per transformation set with the primary
task loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from ien.groups import (
    GroupElement,
    GroupSpec,
    ROTATION,
    ROTOREFLECTION,
    apply_action,
    apply_plan_array,
    plan_for,
)
from ien.layers import GroupLayout, mse
from ien.models import Model, ModelConfig, LayerSpec
from ien.tensor import DTYPES, Tensor, take_channels


@dataclass(frozen=True)
class ElementPolicy:
    """Which non-identity elements enter the loss: all of them, or a seeded
    sample of k per call (identical draw for identical seed)."""

    kind: str = "all"            # "all" | "sample"
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("all", "sample"):
            raise ValueError(f"element policy must be 'all' or 'sample', got {self.kind!r}")
        if self.kind == "sample" and self.k < 1:
            raise ValueError("sample policy needs k >= 1")


@dataclass
class EquivConfig:
    """Weights of the equivariance terms.

    `beta` maps monitor-tap index to its layer weight; taps absent from the
    mapping count as beta 0 and are skipped. `alpha` maps group name to the
    weight of that transformation set's total loss.
    """

    groups: tuple[GroupSpec, ...] = ()
    alpha: dict[str, float] = dc_field(default_factory=dict)
    beta: dict[int, float] = dc_field(default_factory=dict)
    policy: ElementPolicy = ElementPolicy()

    def __post_init__(self):
        for name, a in self.alpha.items():
            if a < 0:
                raise ValueError(f"alpha[{name}] must be >= 0, got {a}")
        for tap, b in self.beta.items():
            if b < 0:
                raise ValueError(f"beta[{tap}] must be >= 0, got {b}")

    @property
    def monitored(self) -> tuple[int, ...]:
        return tuple(sorted(tap for tap, b in self.beta.items() if b > 0))

    @property
    def active(self) -> bool:
        return bool(self.monitored) and any(
            self.alpha.get(g.name, 0.0) > 0 for g in self.groups)


# ---------------------------------------------------------------------------
# which pooled channels a given element trains


def channels_for_element(layout: GroupLayout, spec: GroupSpec,
                         g: GroupElement) -> Optional[np.ndarray]:
    """Pooled-channel indices that element `g` is measured against.

    A feature group of size s < layout order maps onto the size-s subgroup
    of the base set (for rotations: every (order/s)-th rotation), so smaller
    groups only see the elements their subgroup contains. Returns None when
    every channel participates.
    """
    if g.is_identity:
        return None
    sizes = layout.block_sizes()
    if all(s == layout.order for s in sizes):
        return None

    def member(s: int) -> bool:
        if s == layout.order:
            return True
        if s == 1:
            return False
        if spec.kind == ROTATION and spec.order == layout.order:
            step = spec.order // s
            return g.index % step == 0
        if spec.kind == ROTOREFLECTION and spec.order == layout.order:
            n_rot = spec.order // 2
            if g.flip or s > n_rot or n_rot % s != 0:
                return False
            return (g.index % n_rot) % (n_rot // s) == 0
        # scale sets and order mismatches: only full-size groups participate
        return False

    idx = np.array([i for i, s in enumerate(sizes) if member(s)], dtype=np.int64)
    return idx


# ---------------------------------------------------------------------------
# losses


def layer_equiv_loss(h_p: Tensor, h_q: Tensor, g: GroupElement,
                     channels: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean-squared difference between the pooled maps of a
    transformed input and the transformed pooled maps of the original.

    `h_p` comes from the transformed input, `h_q` from the original; the
    spatial action of `g` is applied to `h_q` here. Differentiable in both.
    """
    if h_p.ndim != 4 or h_q.ndim != 4:
        raise ValueError("layer_equiv_loss expects [N,C,H,W] pooled maps")
    if h_p.shape[0] != h_q.shape[0] or h_p.shape[1] != h_q.shape[1]:
        raise ValueError(f"pooled map mismatch: {h_p.shape} vs {h_q.shape}")
    hq_t, mask = apply_action(g, h_q, direction="forward")
    if hq_t.shape != h_p.shape:
        raise ValueError(f"action of {g.describe()} maps {h_q.shape} to "
                         f"{hq_t.shape}, but the transformed branch is {h_p.shape}")
    if channels is not None:
        if channels.size == 0:
            return Tensor(np.zeros((), dtype=h_p.data.dtype))
        h_p = take_channels(h_p, channels)
        hq_t = take_channels(hq_t, channels)
    return mse(h_p, hq_t, None if mask.all_true else mask)


def network_equiv_loss(pooled_p: dict[int, Tensor], pooled_q: dict[int, Tensor],
                       g: GroupElement, config: EquivConfig,
                       layouts: dict[int, GroupLayout],
                       spec: Optional[GroupSpec] = None) -> Tensor:
    """Beta-weighted sum of the per-layer losses over the monitored taps."""
    spec = spec if spec is not None else (config.groups[0] if config.groups else None)
    total: Optional[Tensor] = None
    for tap in config.monitored:
        if tap not in pooled_p or tap not in pooled_q:
            raise ValueError(f"monitored tap {tap} missing from pooled maps")
        channels = None
        if spec is not None and tap in layouts:
            channels = channels_for_element(layouts[tap], spec, g)
        term = layer_equiv_loss(pooled_p[tap], pooled_q[tap], g, channels=channels)
        term = term * config.beta[tap]
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.zeros(()))
    return total


def total_objective(primary: Tensor, equiv_per_group: dict[str, Tensor],
                    config: EquivConfig) -> Tensor:
    """Primary loss plus the alpha-weighted equivariance losses.

    Groups with alpha 0 are skipped outright so a disabled run keeps a
    bit-identical loss graph to plain supervised training.
    """
    total = primary
    for name, loss in equiv_per_group.items():
        a = config.alpha.get(name, 1.0)
        if a < 0:
            raise ValueError(f"alpha[{name}] must be >= 0, got {a}")
        if a == 0.0:
            continue
        total = total + loss * a
    return total


# ---------------------------------------------------------------------------
# meter


@dataclass
class EquivarianceReport:
    """Measured per-layer, per-element loss values with magnitude summary."""

    rows: list[tuple[str, str, float]]          # (layer, element, mse)
    layer_totals: dict[str, float]              # sum over non-identity elements
    magnitudes: dict[str, Optional[int]]        # floor(log10(total)), None for 0
    meta: dict

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "element", "mse"])
            for layer, element, value in self.rows:
                writer.writerow([layer, element, repr(value)])

    def to_json(self, path=None):
        layers: dict[str, dict] = {}
        for layer, element, value in self.rows:
            layers.setdefault(layer, {"elements": {}})["elements"][element] = value
        for layer, total in self.layer_totals.items():
            layers[layer]["total"] = total
            layers[layer]["magnitude"] = self.magnitudes[layer]
        doc = {"meta": self.meta, "layers": layers}
        if path is None:
            return doc
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return doc

    def max_total(self) -> float:
        return max(self.layer_totals.values())


def _magnitude(value: float) -> Optional[int]:
    if value <= 0.0:
        return None
    return math.floor(math.log10(value))


def equiv_meter(model: Model, sample: np.ndarray, spec: GroupSpec,
                layers: Optional[Sequence[int]] = None,
                chunk: int = 256, meta: Optional[dict] = None) -> EquivarianceReport:
    """Measure per-layer equivariance of `model` on a batch of images.

    Runs in eval mode (running batch-norm statistics), forwards the sample
    and each transformed copy, and reports the per-layer masked MSE per
    element plus per-layer totals over non-identity elements. The identity
    element is asserted to contribute exactly zero.
    """
    if sample.ndim != 4:
        raise ValueError(f"sample must be [N,C,H,W], got {sample.shape}")
    if sample.shape[0] < 1:
        raise ValueError("empty sample")
    taps = list(layers) if layers is not None else sorted(model.tap_layouts)
    for tap in taps:
        if tap not in model.tap_layouts:
            raise ValueError(f"tap {tap} has no group layout attached")

    prev_mode = model.mode
    model.eval()
    tap_names = {tap: model.tap_names[tap] for tap in taps}
    dtype = model.config.dtype

    sums: dict[tuple[int, int], float] = {}
    n_total = sample.shape[0]
    for start in range(0, n_total, chunk):
        part = sample[start:start + chunk].astype(DTYPES[dtype])
        x_q = Tensor(part)
        _, pooled_q = model.forward(x_q, collect=True)
        for ei, g in enumerate(spec.elements):
            if g.is_identity:
                continue
            h, w = part.shape[-2:]
            x_p = Tensor(apply_plan_array(plan_for(g, h, w), part))
            _, pooled_p = model.forward(x_p, collect=True)
            for tap in taps:
                cm = channels_for_element(model.tap_layouts[tap], spec, g)
                val = layer_equiv_loss(pooled_p[tap], pooled_q[tap], g,
                                       channels=cm).item()
                key = (tap, ei)
                sums[key] = sums.get(key, 0.0) + val * part.shape[0]

        # identity contributes exactly zero: assert rather than assume
        _, pooled_q2 = model.forward(x_q, collect=True)
        for tap in taps:
            ident = spec.elements[0]
            val = layer_equiv_loss(pooled_q2[tap], pooled_q[tap], ident).item()
            if val != 0.0:
                raise AssertionError(f"identity element produced nonzero loss {val}")

    model.mode = prev_mode

    rows: list[tuple[str, str, float]] = []
    layer_totals: dict[str, float] = {tap_names[t]: 0.0 for t in taps}
    for tap in taps:
        rows.append((tap_names[tap], spec.elements[0].describe(), 0.0))
        for ei, g in enumerate(spec.elements):
            if g.is_identity:
                continue
            val = sums[(tap, ei)] / n_total
            rows.append((tap_names[tap], g.describe(), val))
            layer_totals[tap_names[tap]] += val
    magnitudes = {name: _magnitude(v) for name, v in layer_totals.items()}
    meta = dict(meta or {})
    meta.setdefault("sample_size", int(n_total))
    meta.setdefault("group", spec.name)
    meta.setdefault("model_hash", f"{model.hash:016x}")
    return EquivarianceReport(rows=rows, layer_totals=layer_totals,
                              magnitudes=magnitudes, meta=meta)


# ---------------------------------------------------------------------------
# exactly-equivariant oracle network


def _rot_kernel(kernel: np.ndarray, quarter: int) -> np.ndarray:
    return np.rot90(kernel, quarter, axes=(-2, -1))


def c4_lift_weights(base: np.ndarray) -> np.ndarray:
    """[n, c_in, k, k] base filters -> [4n, c_in, k, k]: four rotated copies
    of each filter, orientation index fastest."""
    n, c_in, k, _ = base.shape
    out = np.empty((4 * n, c_in, k, k), dtype=base.dtype)
    for o in range(n):
        for r in range(4):
            out[o * 4 + r] = _rot_kernel(base[o], r)
    return out


def c4_group_weights(base: np.ndarray) -> np.ndarray:
    """[n_out, n_in, 4, k, k] base filters -> [4*n_out, 4*n_in, k, k] with
    rotated kernels and cyclically shifted orientation channels."""
    n_out, n_in, four, k, _ = base.shape
    assert four == 4
    out = np.empty((4 * n_out, 4 * n_in, k, k), dtype=base.dtype)
    for o in range(n_out):
        for r in range(4):
            for i in range(n_in):
                for s in range(4):
                    out[o * 4 + r, i * 4 + s] = _rot_kernel(base[o, i, (s - r) % 4], r)
    return out


def build_c4_oracle(seed: int, channels_per_group: int = 2, layers: int = 3,
                    in_channels: int = 1, kernel: int = 3,
                    image_size: int = 12) -> Model:
    """A conv/relu stack whose filter banks are exact 90-degree-rotated
    (and orientation-permuted) copies of base filters, so group-pooled maps
    are rotation-equivariant up to float round-off. Built in f64.
    """
    if layers < 1:
        raise ValueError("oracle needs at least one layer")
    n = channels_per_group
    layout = GroupLayout.homogeneous(4, n)
    specs: list[LayerSpec] = []
    for _ in range(layers):
        specs += [LayerSpec("conv", k=kernel, stride=1, padding=kernel // 2,
                            layout=layout),
                  LayerSpec("relu"),
                  LayerSpec("monitor")]
    config = ModelConfig(input_shape=(in_channels, image_size, image_size),
                         classes=0, base_groups=n, layers=tuple(specs),
                         dtype="f64")
    model = Model(config, seed)

    gen = np.random.Generator(np.random.PCG64(seed))
    convs = model.conv_layers()
    fan_in0 = in_channels * kernel * kernel
    base0 = gen.normal(0.0, math.sqrt(2.0 / fan_in0),
                       size=(n, in_channels, kernel, kernel))
    convs[0].weight.data[...] = c4_lift_weights(base0)
    convs[0].bias = None
    for conv in convs[1:]:
        fan_in = 4 * n * kernel * kernel
        base = gen.normal(0.0, math.sqrt(2.0 / fan_in),
                          size=(n, n, 4, kernel, kernel))
        conv.weight.data[...] = c4_group_weights(base)
        conv.bias = None
    return model
