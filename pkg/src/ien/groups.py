"""Finite transformation sets and their actions on image-like tensors.

Exact actions (90-degree rotation multiples, axis flips) are pure index
permutations and therefore bit-exact. Anything else (45-degree rotations,
rescaling) goes through bilinear resampling with an attached validity mask
marking the pixels whose source footprint lies fully inside the image.

Rotations are counterclockwise about the pixel-center origin
((H-1)/2, (W-1)/2); rescaling aligns the corner pixel centers of source
and target grids so that every resampled coordinate stays in bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from ien.tensor import Tensor, record

ROTATION = "rotation"
REFLECTION = "reflection"
ROTOREFLECTION = "rotoreflection"
SCALE = "scale"


@dataclass(frozen=True)
class GroupElement:
    """One transformation: a rotation angle, an optional flip, or a scale factor."""

    kind: str
    index: int
    angle_deg: float = 0.0
    flip: bool = False          # horizontal mirror applied after the rotation
    factor: float = 1.0

    @property
    def is_identity(self) -> bool:
        return (self.angle_deg % 360.0 == 0.0) and not self.flip and self.factor == 1.0

    def inverse(self) -> "GroupElement":
        """Inverse transformation; for scale sets the inverse factor may not
        itself be an enumerated element."""
        if self.kind == SCALE:
            return GroupElement(SCALE, -1, factor=1.0 / self.factor)
        if self.flip:
            # a rotation followed by a mirror is an involution
            return self
        return GroupElement(self.kind, -1, angle_deg=(-self.angle_deg) % 360.0)

    def describe(self) -> str:
        if self.kind == SCALE:
            return f"scale{self.factor:g}"
        tag = f"rot{self.angle_deg:g}"
        return tag + "f" if self.flip else tag


@dataclass(frozen=True)
class GroupSpec:
    """An ordered finite set of transformations, identity first."""

    kind: str
    name: str
    elements: tuple[GroupElement, ...] = field(repr=False)

    @property
    def order(self) -> int:
        return len(self.elements)

    def non_identity(self) -> tuple[GroupElement, ...]:
        return tuple(g for g in self.elements if not g.is_identity)

    @staticmethod
    def rotations(n: int) -> "GroupSpec":
        """n equidistant rotations: [0, 360/n, 2*360/n, ...] degrees."""
        if n < 1:
            raise ValueError("rotation set needs order >= 1")
        els = tuple(GroupElement(ROTATION, k, angle_deg=k * (360.0 / n)) for k in range(n))
        return GroupSpec(ROTATION, f"R{n}", els)

    @staticmethod
    def rotoreflections(n: int) -> "GroupSpec":
        """n rotations followed by the same n rotations mirrored (2n elements)."""
        if n < 1:
            raise ValueError("rotoreflection set needs rotation order >= 1")
        els = [GroupElement(ROTOREFLECTION, k, angle_deg=k * (360.0 / n)) for k in range(n)]
        els += [GroupElement(ROTOREFLECTION, n + k, angle_deg=k * (360.0 / n), flip=True)
                for k in range(n)]
        return GroupSpec(ROTOREFLECTION, f"R{n}R", tuple(els))

    @staticmethod
    def reflections() -> "GroupSpec":
        return GroupSpec(REFLECTION, "R1R",
                         (GroupElement(REFLECTION, 0),
                          GroupElement(REFLECTION, 1, flip=True)))

    @staticmethod
    def scales(factors=(0.5, 1.0, 2.0)) -> "GroupSpec":
        """Finite scale set; the identity factor 1 must be present and is
        reordered to the front."""
        fs = list(dict.fromkeys(float(f) for f in factors))
        if any(f <= 0 for f in fs):
            raise ValueError("scale factors must be positive")
        if 1.0 not in fs:
            raise ValueError("scale set must contain the identity factor 1")
        fs.remove(1.0)
        ordered = [1.0] + sorted(fs)
        els = tuple(GroupElement(SCALE, i, factor=f) for i, f in enumerate(ordered))
        return GroupSpec(SCALE, "S" + ",".join(f"{f:g}" for f in ordered), els)

    @staticmethod
    def from_name(name: str) -> "GroupSpec":
        """Parse "R4", "R8", "R4R", "S" or "S:0.5,1,2"."""
        text = name.strip()
        if text.upper() == "S":
            return GroupSpec.scales()
        if text.upper().startswith("S:"):
            return GroupSpec.scales(tuple(float(p) for p in text[2:].split(",")))
        if text.upper().startswith("R"):
            body = text[1:]
            if body.upper().endswith("R"):
                return GroupSpec.rotoreflections(int(body[:-1]))
            return GroupSpec.rotations(int(body))
        raise ValueError(f"unknown group name {name!r}")


def enumerate_elements(spec: GroupSpec) -> tuple[GroupElement, ...]:
    """Stable element order: identity first, rotations by ascending angle,
    mirrored rotations after the plain ones."""
    return spec.elements


@dataclass
class ValidMask:
    """Boolean H x W grid of pixels unaffected by resampling borders."""

    h: int
    w: int
    mask: np.ndarray

    @property
    def all_true(self) -> bool:
        return bool(self.mask.all())

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def intersect(self, other: "ValidMask") -> "ValidMask":
        if (self.h, self.w) != (other.h, other.w):
            raise ValueError("mask shape mismatch")
        return ValidMask(self.h, self.w, self.mask & other.mask)

    @staticmethod
    def full(h: int, w: int) -> "ValidMask":
        return ValidMask(h, w, np.ones((h, w), dtype=bool))


# ---------------------------------------------------------------------------
# resampling plans


@dataclass
class ResamplePlan:
    """Precomputed mapping from output pixels to source pixels.

    Exact plans hold a flat permutation `perm` (out.flat[i] = in.flat[perm[i]]).
    Interpolated plans hold up to four source indices and weights per output
    pixel; out-of-bounds corners carry zero weight (zero-fill semantics).
    """

    in_h: int
    in_w: int
    out_h: int
    out_w: int
    valid: np.ndarray                      # bool, (out_h*out_w,)
    perm: Optional[np.ndarray] = None      # int64, exact path
    idx: Optional[np.ndarray] = None       # int64, (4, out_h*out_w)
    weight: Optional[np.ndarray] = None    # float64, (4, out_h*out_w)

    @property
    def exact(self) -> bool:
        return self.perm is not None


def _exact_perm(g: GroupElement, h: int, w: int) -> np.ndarray:
    """Flat gather indices realized by applying numpy's own rot90/flip to an
    index grid, so exact actions agree with np.rot90 semantics by construction."""
    grid = np.arange(h * w, dtype=np.int64).reshape(h, w)
    quarter = int(round((g.angle_deg % 360.0) / 90.0))
    grid = np.rot90(grid, quarter)
    if g.flip:
        grid = grid[:, ::-1]
    return np.ascontiguousarray(grid).reshape(-1)


def _is_exact(g: GroupElement, h: int, w: int) -> bool:
    if g.kind == SCALE:
        return g.factor == 1.0
    if g.angle_deg % 90.0 != 0.0:
        return False
    quarter = int(round((g.angle_deg % 360.0) / 90.0))
    if quarter % 2 == 1 and h != w:
        raise ValueError(f"90-degree rotation of a non-square {h}x{w} map")
    return True


def _bilinear_tables(src_r: np.ndarray, src_c: np.ndarray, h: int, w: int):
    """Index/weight tables for bilinear sampling at fractional coordinates.

    Corners with zero weight never affect validity, so coordinates landing
    exactly on the grid stay valid at the borders.
    """
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    r1 = r0 + 1
    c1 = c0 + 1

    weights = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    rows = np.stack([r0, r0, r1, r1])
    cols = np.stack([c0, c1, c0, c1])

    inb = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    valid = np.all(inb | (weights == 0.0), axis=0)
    weights = np.where(inb, weights, 0.0)
    rows_cl = np.clip(rows, 0, h - 1)
    cols_cl = np.clip(cols, 0, w - 1)
    idx = rows_cl * w + cols_cl
    return idx, weights, valid


def _build_plan(g: GroupElement, h: int, w: int) -> ResamplePlan:
    if g.kind == SCALE and g.factor != 1.0:
        oh = g.factor * h
        ow = g.factor * w
        if abs(oh - round(oh)) > 1e-9 or abs(ow - round(ow)) > 1e-9:
            raise ValueError(f"scale {g.factor} of {h}x{w} yields non-integer extent")
        oh, ow = int(round(oh)), int(round(ow))
        if oh < 1 or ow < 1:
            raise ValueError(f"scale {g.factor} collapses {h}x{w} to zero extent")
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        src_r = (oi.reshape(-1) * (h - 1)) / max(oh - 1, 1)
        src_c = (oj.reshape(-1) * (w - 1)) / max(ow - 1, 1)
        idx, weight, valid = _bilinear_tables(src_r, src_c, h, w)
        return ResamplePlan(h, w, oh, ow, valid, idx=idx, weight=weight)

    if _is_exact(g, h, w):
        perm = _exact_perm(g, h, w)
        quarter = int(round((g.angle_deg % 360.0) / 90.0))
        oh, ow = (w, h) if quarter % 2 == 1 else (h, w)
        return ResamplePlan(h, w, oh, ow, np.ones(oh * ow, dtype=bool), perm=perm)

    return _rotation_plan(g.angle_deg, h, w, flip=g.flip)


def _rotation_plan(angle_deg: float, h: int, w: int, flip: bool = False) -> ResamplePlan:
    """Bilinear plan for an arbitrary-angle counterclockwise rotation."""
    if h != w:
        raise ValueError(f"interpolated rotation of a non-square {h}x{w} map")
    theta = math.radians(angle_deg)
    cr = (h - 1) / 2.0
    cc = (w - 1) / 2.0
    oi, oj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    if flip:
        oj = (w - 1) - oj  # undo the mirror before undoing the rotation
    u = oi.reshape(-1) - cr
    v = oj.reshape(-1) - cc
    # inverse rotation of the output coordinate gives the source coordinate
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    src_r = cos_t * u + sin_t * v + cr
    src_c = -sin_t * u + cos_t * v + cc
    idx, weight, valid = _bilinear_tables(src_r, src_c, h, w)
    return ResamplePlan(h, w, h, w, valid, idx=idx, weight=weight)


@lru_cache(maxsize=512)
def _plan_cached(g: GroupElement, h: int, w: int) -> ResamplePlan:
    return _build_plan(g, h, w)


def rotation_plan(angle_deg: float, h: int, w: int) -> ResamplePlan:
    """Plan for an arbitrary rotation angle (dataset synthesis uses this);
    multiples of 90 degrees route to the exact path."""
    g = GroupElement(ROTATION, -1, angle_deg=angle_deg % 360.0)
    if _is_exact(g, h, w):
        return _plan_cached(GroupElement(ROTATION, -1, angle_deg=g.angle_deg % 360.0), h, w)
    return _rotation_plan(angle_deg, h, w)


def apply_plan_array(plan: ResamplePlan, arr: np.ndarray) -> np.ndarray:
    """Apply a plan to the two trailing axes of a plain ndarray."""
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, plan.in_h * plan.in_w)
    if plan.exact:
        out = flat[:, plan.perm]
    else:
        w = plan.weight.astype(arr.dtype)
        out = (w[0] * flat[:, plan.idx[0]] + w[1] * flat[:, plan.idx[1]]
               + w[2] * flat[:, plan.idx[2]] + w[3] * flat[:, plan.idx[3]])
        out[:, ~plan.valid] = 0.0  # zero-fill anything without full support
    return out.reshape(*lead, plan.out_h, plan.out_w)


def _plan_backward(plan: ResamplePlan, grad: np.ndarray) -> np.ndarray:
    """Transpose of apply_plan_array for the trailing two axes."""
    lead = grad.shape[:-2]
    g = grad.reshape(-1, plan.out_h * plan.out_w)
    if plan.exact:
        out = np.empty((g.shape[0], plan.in_h * plan.in_w), dtype=grad.dtype)
        out[:, plan.perm] = g
        return out.reshape(*lead, plan.in_h, plan.in_w)
    g = np.where(plan.valid[None, :], g, 0.0)
    out = np.zeros((plan.in_h * plan.in_w, g.shape[0]), dtype=grad.dtype)
    gt = g.T
    for t in range(4):
        np.add.at(out, plan.idx[t], plan.weight[t][:, None].astype(grad.dtype) * gt)
    return out.T.reshape(*lead, plan.in_h, plan.in_w)


def plan_for(g: GroupElement, h: int, w: int, direction: str = "forward") -> ResamplePlan:
    if direction == "inverse":
        g = g.inverse()
    elif direction != "forward":
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    return _plan_cached(g, h, w)


def apply_action(g: GroupElement, t: Tensor, direction: str = "forward",
                 in_mask: Optional[ValidMask] = None) -> tuple[Tensor, ValidMask]:
    """Apply a group element to the spatial axes of an [N, C, H, W] tensor.

    Exact actions are bit-exact permutations with an all-true mask;
    interpolated ones return the footprint validity mask. When `in_mask`
    is given, invalidity propagates: an output pixel is valid only if every
    source pixel it reads (with nonzero weight) was itself valid, so masks
    stay sound across chained actions. Differentiable: the backward rule is
    the transpose of the (linear) resampling.
    """
    if t.ndim < 2:
        raise ValueError("apply_action expects at least 2 spatial dims")
    h, w = t.shape[-2], t.shape[-1]
    plan = plan_for(g, h, w, direction)
    out = Tensor(apply_plan_array(plan, t.data))

    out_valid = plan.valid.copy()
    if in_mask is not None:
        if (in_mask.h, in_mask.w) != (h, w):
            raise ValueError(f"in_mask shape {(in_mask.h, in_mask.w)} does not "
                             f"match input spatial dims {(h, w)}")
        src_ok = in_mask.mask.reshape(-1)
        if plan.exact:
            out_valid &= src_ok[plan.perm]
        else:
            for corner in range(4):
                out_valid &= src_ok[plan.idx[corner]] | (plan.weight[corner] == 0.0)
    mask = ValidMask(plan.out_h, plan.out_w, out_valid.reshape(plan.out_h, plan.out_w))

    def bwd(grad):
        return (_plan_backward(plan, grad),)

    return record(f"apply_action[{g.describe()}/{direction}]", (t,), out, bwd), mask


def valid_region_mask(g: GroupElement, h: int, w: int, direction: str = "forward") -> ValidMask:
    """Pixels of the transformed map whose bilinear source footprint is fully
    in-bounds; all-true for exact actions."""
    plan = plan_for(g, h, w, direction)
    return ValidMask(plan.out_h, plan.out_w,
                     plan.valid.reshape(plan.out_h, plan.out_w).copy())
