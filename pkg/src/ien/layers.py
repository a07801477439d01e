"""Differentiable layers: convolution, batch norm, activations, pooling,
the classifier head losses, and max-pooling over feature groups.

Feature groups are consecutive channel blocks described by a GroupLayout;
`group_pool` collapses each block to one channel by pixel-wise maximum.
The un-pooled activations always feed the next layer - pooling is a side
branch used by the equivariance loss and meter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ien.groups import ValidMask
from ien.tensor import DTYPES, Tensor, record, tsum


# ---------------------------------------------------------------------------
# feature-group layout


@dataclass(frozen=True)
class GroupLayout:
    """Per-layer feature-group description: ordered (size, count) runs.

    `order` is the base transformation-set size; every group size must
    divide it so each group maps onto a subgroup of the base set.
    """

    order: int
    groups: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("layout order must be >= 1")
        for size, count in self.groups:
            if size < 1 or count < 1:
                raise ValueError(f"bad layout run (size={size}, count={count})")
            if self.order % size != 0:
                raise ValueError(f"group size {size} does not divide order {self.order}")

    @property
    def total_channels(self) -> int:
        return sum(size * count for size, count in self.groups)

    @property
    def pooled_channels(self) -> int:
        return sum(count for _, count in self.groups)

    def block_sizes(self) -> list[int]:
        """Group size per pooled channel, in channel order."""
        sizes: list[int] = []
        for size, count in self.groups:
            sizes.extend([size] * count)
        return sizes

    @staticmethod
    def homogeneous(order: int, count: int) -> "GroupLayout":
        return GroupLayout(order, ((order, count),))


# ---------------------------------------------------------------------------
# layer records


@dataclass
class ConvLayer:
    weight: Tensor                # [C_out, C_in, k, k]
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0

    @property
    def kernel(self) -> int:
        return self.weight.shape[-1]


@dataclass
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(channels: int, dtype: str = "f32", momentum: float = 0.1,
               eps: float = 1e-5) -> "BatchNormLayer":
        np_dtype = DTYPES[dtype]
        return BatchNormLayer(
            gamma=Tensor(np.ones(channels, dtype=np_dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np_dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np_dtype),
            running_var=np.ones(channels, dtype=np_dtype),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class LinearLayer:
    weight: Tensor                # [D_in, D_out]
    bias: Tensor                  # [D_out]


# ---------------------------------------------------------------------------
# im2col convolution


def _out_extent(h: int, k: int, stride: int, pad: int) -> int:
    out = (h + 2 * pad - k) // stride + 1
    if out < 1 or (h + 2 * pad - k) < 0:
        raise ValueError(f"non-positive output extent for H={h}, k={k}, "
                         f"stride={stride}, pad={pad}")
    return out


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = _out_extent(h, k, stride, pad)
    ow = _out_extent(w, k, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        i_max = i + stride * oh
        for j in range(k):
            j_max = j + stride * ow
            col[:, :, i, j] = x[:, :, i:i_max:stride, j:j_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k), oh, ow


def _col2im(col: np.ndarray, x_shape, k: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    col = col.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(k):
        i_max = i + stride * oh
        for j in range(k):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, :, i, j]
    if pad > 0:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    """2-D cross-correlation with zero padding (no kernel flip)."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W], got {x.shape}")
    w = layer.weight
    c_out, c_in, kh, kw = w.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, weight {c_in}")
    if x.data.dtype != w.data.dtype:
        raise TypeError(f"conv2d dtype mismatch: {x.dtype} vs {w.dtype}")

    n = x.shape[0]
    col, oh, ow = _im2col(x.data, kh, layer.stride, layer.padding)
    w2d = w.data.reshape(c_out, -1)
    out2d = col @ w2d.T
    if layer.bias is not None:
        out2d = out2d + layer.bias.data
    out = Tensor(out2d.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))

    bias = layer.bias

    def bwd(grad):
        g2d = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2d.T @ col).reshape(w.shape)
        gb = g2d.sum(axis=0) if bias is not None else None
        gcol = g2d @ w2d
        gx = _col2im(gcol, x.shape, kh, layer.stride, layer.padding, oh, ow)
        return gx, gw, gb

    inputs = (x, w, bias) if bias is not None else (x, w, None)
    return record("conv2d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(x: Tensor, layer: BatchNormLayer, mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and updates the running ones by
    `momentum`; eval mode is a fixed affine map from the running stats.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects [N,C,H,W], got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if c != layer.gamma.size:
        raise ValueError(f"batchnorm2d channel mismatch: {c} vs {layer.gamma.size}")

    gamma4 = layer.gamma.data.reshape(1, c, 1, 1)
    beta4 = layer.beta.data.reshape(1, c, 1, 1)

    if mode == "eval":
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.eps)
        scale = (gamma4 * inv_std.reshape(1, c, 1, 1)).astype(x.data.dtype)
        shift = (beta4 - layer.running_mean.reshape(1, c, 1, 1) * scale).astype(x.data.dtype)
        out = Tensor(x.data * scale + shift)

        def bwd_eval(grad):
            gg = (grad * ((x.data - layer.running_mean.reshape(1, c, 1, 1))
                          * inv_std.reshape(1, c, 1, 1))).sum(axis=(0, 2, 3))
            gb = grad.sum(axis=(0, 2, 3))
            return grad * scale, gg.astype(layer.gamma.data.dtype), gb.astype(layer.beta.data.dtype)

        return record("batchnorm2d[eval]", (x, layer.gamma, layer.beta), out, bwd_eval)

    if n < 2:
        raise ValueError("batchnorm2d train mode needs batch size >= 2")

    m = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mean.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xn = xc * inv_std.reshape(1, c, 1, 1)
    out = Tensor(gamma4 * xn + beta4)

    # running stats track the batch ones outside the autodiff graph;
    # running_var uses the unbiased estimate
    unbiased = var * (m / (m - 1)) if m > 1 else var
    layer.running_mean += layer.momentum * (mean - layer.running_mean)
    layer.running_var += layer.momentum * (unbiased - layer.running_var)

    def bwd_train(grad):
        gg = (grad * xn).sum(axis=(0, 2, 3))
        gb = grad.sum(axis=(0, 2, 3))
        gxn = grad * gamma4
        gvar_term = (gxn * xn).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gmean_term = gxn.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
        gx = inv_std.reshape(1, c, 1, 1) * (gxn - gmean_term - xn * gvar_term)
        return gx, gg.astype(layer.gamma.data.dtype), gb.astype(layer.beta.data.dtype)

    return record("batchnorm2d[train]", (x, layer.gamma, layer.beta), out, bwd_train)


# ---------------------------------------------------------------------------
# activations / pooling / heads


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    positive = x.data > 0
    return record("relu", (x,), out, lambda g: (g * positive,))


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    oh = _out_extent(h, k, stride, 0)
    ow = _out_extent(w, k, stride, 0)
    col, _, _ = _im2col(x.data.reshape(n * c, 1, h, w), k, stride, 0)
    arg = col.argmax(axis=1)
    out = Tensor(col[np.arange(col.shape[0]), arg].reshape(n, c, oh, ow))

    def bwd(grad):
        gcol = np.zeros_like(col)
        gcol[np.arange(col.shape[0]), arg] = grad.reshape(-1)
        gx = _col2im(gcol, (n * c, 1, h, w), k, stride, 0, oh, ow)
        return (gx.reshape(n, c, h, w),)

    return record("maxpool2d", (x,), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(grad):
        g = np.broadcast_to(grad.reshape(n, c, 1, 1) / (h * w), x.shape)
        return (g.copy(),)

    return record("global_avg_pool", (x,), out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    from ien.tensor import add, matmul
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def group_pool(h: Tensor, layout: GroupLayout) -> Tensor:
    """Pixel-wise maximum over each feature group's channel block.

    Gradient routes to the argmax channel; ties go to the lowest index.
    """
    if h.ndim != 4:
        raise ValueError(f"group_pool expects [N,C,H,W], got {h.shape}")
    n, c, hh, ww = h.shape
    if c != layout.total_channels:
        raise ValueError(f"group_pool channel mismatch: input {c}, layout "
                         f"{layout.total_channels}")

    blocks: list[tuple[int, int]] = []
    start = 0
    for size in layout.block_sizes():
        blocks.append((start, size))
        start += size

    out_data = np.empty((n, len(blocks), hh, ww), dtype=h.data.dtype)
    args: list[np.ndarray] = []
    for bi, (st, size) in enumerate(blocks):
        blk = h.data[:, st:st + size]
        a = blk.argmax(axis=1)
        args.append(a)
        out_data[:, bi] = np.take_along_axis(blk, a[:, None], axis=1)[:, 0]
    out = Tensor(out_data)

    def bwd(grad):
        gx = np.zeros_like(h.data)
        for bi, (st, size) in enumerate(blocks):
            np.put_along_axis(gx[:, st:st + size], args[bi][:, None],
                              grad[:, bi][:, None], axis=1)
        return (gx,)

    return record("group_pool", (h,), out, bwd)


def mse(a: Tensor, b: Tensor, mask: Optional[ValidMask] = None) -> Tensor:
    """Mean of squared differences, restricted to unmasked pixels.

    The mask covers the trailing (H, W) axes and broadcasts over the rest.
    Normalization is by the number of unmasked elements, so values stay
    comparable across layers of different spatial size.
    """
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    sq = d * d
    if mask is None:
        return tsum(sq) * (1.0 / a.size)
    if mask.mask.shape != a.shape[-2:]:
        raise ValueError(f"mask shape {mask.mask.shape} does not match "
                         f"spatial dims {a.shape[-2:]}")
    unmasked = mask.count
    if unmasked == 0:
        raise ValueError("mse over an empty valid mask")
    lead = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    m = Tensor(mask.mask.astype(a.data.dtype))
    return tsum(sq * m) * (1.0 / (unmasked * lead))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilized by
    max-subtraction."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N,K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    log_probs = z - np.log(sez)
    loss = Tensor(np.asarray(-log_probs[np.arange(n), labels].mean(),
                             dtype=logits.data.dtype))

    def bwd(grad):
        probs = ez / sez
        probs[np.arange(n), labels] -= 1.0
        return (grad * probs / n,)

    return record("softmax_cross_entropy", (logits,), out=loss, backward_fn=bwd)
