"""Dataset handling: IDX binary ingestion/emission, rotated and rescaled
digit-set synthesis, a built-in procedural glyph renderer for desk-scale
runs, and construction of training batches carrying transformed copies.

IDX files follow the usual big-endian layout (magic 0x00000803 for image
cubes, 0x00000801 for label vectors). Saving quantizes pixels to bytes via
round(v * 255); an optional .npy sidecar preserves exact float values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ien.groups import GroupElement, GroupSpec, ValidMask, apply_plan_array, \
    plan_for, rotation_plan
from ien.tensor import Tensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAX_ELEMENTS = 1 << 33


@dataclass
class Dataset:
    images: np.ndarray          # [N, 1, H, W] float32 in [0, 1]
    labels: np.ndarray          # [N] int64
    split: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} do not match labels "
                             f"{self.labels.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# IDX format


def load_idx_images(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} (expected image IDX)")
    if n * h * w > _MAX_ELEMENTS:
        raise ValueError(f"{path}: extent overflow ({n}x{h}x{w})")
    if len(raw) != 16 + n * h * w:
        raise ValueError(f"{path}: truncated IDX payload "
                         f"({len(raw) - 16} of {n * h * w} bytes)")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return (pixels.astype(np.float32) / 255.0).reshape(n, 1, h, w)


def load_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} (expected label IDX)")
    if len(raw) != 8 + n:
        raise ValueError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def save_idx_images(path, images: np.ndarray) -> None:
    n, c, h, w = images.shape
    if c != 1:
        raise ValueError("IDX image files hold single-channel images")
    data = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(data.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("IDX labels must fit in a byte")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def save_dataset(ds: Dataset, images_path, labels_path, float_sidecar: bool = False) -> None:
    save_idx_images(images_path, ds.images)
    save_idx_labels(labels_path, ds.labels)
    if float_sidecar:
        np.save(str(images_path) + ".npy", ds.images)


def load_dataset(images_path, labels_path, split: str = "") -> Dataset:
    sidecar = Path(str(images_path) + ".npy")
    if sidecar.exists():
        images = np.load(sidecar)
    else:
        images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    return Dataset(images=images, labels=labels, split=split)


# ---------------------------------------------------------------------------
# deterministic per-index randomness


_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D49BDBAA630291) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derived_unit(seed: int, index: int) -> float:
    """Deterministic float in [0, 1) for (seed, index); images can therefore
    be synthesized in any order (or in parallel) without changing results."""
    z = splitmix64((seed & _MASK64) ^ splitmix64(index & _MASK64))
    return (z >> 11) * (2.0 ** -53)


# ---------------------------------------------------------------------------
# synthesis


def rotate_images(images: np.ndarray, angles_deg: np.ndarray) -> np.ndarray:
    """Rotate each image about its center by its own angle, bilinear with
    zero fill; multiples of 90 degrees take the exact path."""
    out = np.empty_like(images)
    h, w = images.shape[-2:]
    for i in range(images.shape[0]):
        plan = rotation_plan(float(angles_deg[i]), h, w)
        out[i] = apply_plan_array(plan, images[i])
    return out


def synth_rot_mnist(base: Dataset, seed: int) -> Dataset:
    """Each image rotated by an independent uniform angle in [0, 360) deg."""
    angles = np.array([derived_unit(seed, i) * 360.0 for i in range(len(base))])
    images = rotate_images(base.images, angles)
    return Dataset(images=images, labels=base.labels.copy(),
                   split=base.split, seed=seed)


def synth_scale_mnist(base: Dataset, seed: int, lo: float = 0.3,
                      hi: float = 1.0) -> Dataset:
    """Each image rescaled by an independent uniform factor in [lo, hi] and
    zero-padded back to the original frame, centered."""
    n, _, h, w = base.images.shape
    out = np.zeros_like(base.images)
    for i in range(n):
        factor = lo + derived_unit(seed, i) * (hi - lo)
        nh = max(2, int(round(factor * h)))
        nw = max(2, int(round(factor * w)))
        resized = _resize_bilinear(base.images[i, 0], nh, nw)
        top = (h - nh) // 2
        left = (w - nw) // 2
        out[i, 0, top:top + nh, left:left + nw] = resized
    return Dataset(images=out, labels=base.labels.copy(), split=base.split, seed=seed)


def _resize_bilinear(img: np.ndarray, nh: int, nw: int) -> np.ndarray:
    h, w = img.shape
    rows = (np.arange(nh) * (h - 1)) / max(nh - 1, 1)
    cols = (np.arange(nw) * (w - 1)) / max(nw - 1, 1)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return (top * (1 - fr) + bot * fr).astype(img.dtype)


# ---------------------------------------------------------------------------
# built-in glyph digits (desk-scale stand-in for real handwritten sets)


def _arc(cx, cy, r, a0, a1, n=24, ry=None):
    ry = r if ry is None else ry
    ts = np.linspace(math.radians(a0), math.radians(a1), n)
    return [(cx + r * math.cos(t), cy - ry * math.sin(t)) for t in ts]


# strokes per digit on the unit square (x right, y down), drawn as polylines
_GLYPHS: dict[int, list[list[tuple[float, float]]]] = {
    0: [_arc(0.5, 0.5, 0.26, 0, 360, ry=0.36)],
    1: [[(0.36, 0.3), (0.54, 0.14)], [(0.54, 0.14), (0.54, 0.86)],
        [(0.36, 0.86), (0.7, 0.86)]],
    2: [_arc(0.5, 0.32, 0.24, 170, -20), [(0.72, 0.4), (0.28, 0.84)],
        [(0.28, 0.84), (0.76, 0.84)]],
    3: [_arc(0.48, 0.3, 0.2, 150, -80), _arc(0.48, 0.68, 0.24, 80, -150)],
    4: [[(0.62, 0.14), (0.24, 0.6)], [(0.24, 0.6), (0.8, 0.6)],
        [(0.62, 0.3), (0.62, 0.88)]],
    5: [[(0.72, 0.16), (0.32, 0.16)], [(0.32, 0.16), (0.3, 0.45)],
        _arc(0.47, 0.64, 0.24, 120, -140)],
    6: [_arc(0.52, 0.66, 0.21, 0, 360), _arc(0.6, 0.42, 0.33, 75, 175)],
    7: [[(0.26, 0.16), (0.76, 0.16)], [(0.76, 0.16), (0.42, 0.86)]],
    8: [_arc(0.5, 0.32, 0.19, 0, 360, ry=0.17), _arc(0.5, 0.68, 0.23, 0, 360, ry=0.2)],
    9: [_arc(0.45, 0.34, 0.2, 0, 360), [(0.65, 0.36), (0.65, 0.88)]],
}


def render_glyph(digit: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One white-on-black digit image with per-sample style jitter, drawn on
    a 2x supersampled canvas and downsampled for soft edges."""
    from PIL import Image, ImageDraw

    ss = size * 2
    img = Image.new("L", (ss, ss), 0)
    draw = ImageDraw.Draw(img)
    scale = rng.uniform(0.78, 0.95)
    angle = rng.uniform(-8.0, 8.0)
    dx = rng.uniform(-0.04, 0.04)
    dy = rng.uniform(-0.04, 0.04)
    width = int(rng.integers(4, 7))
    ca, sa = math.cos(math.radians(angle)), math.sin(math.radians(angle))

    def to_px(p):
        x, y = p[0] - 0.5, p[1] - 0.5
        x, y = ca * x - sa * y, sa * x + ca * y
        return ((x * scale + 0.5 + dx) * ss, (y * scale + 0.5 + dy) * ss)

    for stroke in _GLYPHS[digit]:
        jitter = rng.uniform(-0.012, 0.012, size=2)
        pts = [to_px((p[0] + jitter[0], p[1] + jitter[1])) for p in stroke]
        draw.line(pts, fill=255, width=width, joint="curve")
    small = img.resize((size, size), Image.BILINEAR)
    arr = np.asarray(small, dtype=np.float32) / 255.0
    return arr * rng.uniform(0.85, 1.0)


def render_glyph_dataset(count: int, seed: int, image_size: int = 28,
                         split: str = "") -> Dataset:
    """Balanced 10-class synthetic digit set; deterministic per seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    images = np.zeros((count, 1, image_size, image_size), dtype=np.float32)
    labels = np.zeros(count, dtype=np.int64)
    order = np.random.Generator(np.random.PCG64(splitmix64(seed))).permutation(count)
    for i in range(count):
        digit = int(order[i] % 10)
        rng = np.random.Generator(np.random.PCG64(splitmix64(seed ^ splitmix64(i + 1))))
        images[i, 0] = render_glyph(digit, image_size, rng)
        labels[i] = digit
    return Dataset(images=images, labels=labels, split=split, seed=seed)


# ---------------------------------------------------------------------------
# equivariance batches


@dataclass
class EquivBatch:
    """A batch plus its transformed copies, one per chosen group element."""

    x: Tensor                   # [B, C, H, W] originals
    labels: np.ndarray
    copies: list[tuple[GroupElement, Tensor, ValidMask]]
    group_of: list[str]         # group name per copy, aligned with `copies`


def make_equiv_batch(images: np.ndarray, labels: np.ndarray,
                     specs: tuple[GroupSpec, ...], policy_kind: str = "all",
                     sample_k: int = 1, sample_seed: int = 0) -> EquivBatch:
    """Build the transformed copies of a batch.

    With the "all" policy every non-identity element of every spec produces
    one copy; "sample" draws `sample_k` elements per spec from the seed
    (identical draw for an identical seed).
    """
    h, w = images.shape[-2:]
    copies: list[tuple[GroupElement, Tensor, ValidMask]] = []
    group_of: list[str] = []
    for spec in specs:
        if spec.kind in ("rotation", "rotoreflection") and h != w \
                and any(g.angle_deg % 180.0 != 0.0 for g in spec.non_identity()):
            raise ValueError(f"non-square {h}x{w} images with rotation set {spec.name}")
        elements = list(spec.non_identity())
        if not elements:
            continue
        if policy_kind == "sample":
            gen = np.random.Generator(np.random.PCG64(splitmix64(sample_seed)))
            picks = gen.choice(len(elements), size=min(sample_k, len(elements)),
                               replace=False)
            elements = [elements[int(i)] for i in sorted(picks)]
        elif policy_kind != "all":
            raise ValueError(f"unknown element policy {policy_kind!r}")
        for g in elements:
            plan = plan_for(g, h, w)
            data = apply_plan_array(plan, images)
            mask = ValidMask(plan.out_h, plan.out_w,
                             plan.valid.reshape(plan.out_h, plan.out_w).copy())
            copies.append((g, Tensor(data), mask))
            group_of.append(spec.name)
    return EquivBatch(x=Tensor(images), labels=np.asarray(labels, dtype=np.int64),
                      copies=copies, group_of=group_of)


# ---------------------------------------------------------------------------
# manifest


def write_dataset_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
