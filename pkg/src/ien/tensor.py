"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a flat row-major numpy buffer (f32 or f64). Operations
executed while a Tape is active record backward rules onto that tape;
`backward(loss, tape)` then walks the tape in reverse to populate `.grad`
on every reachable tensor that requires gradients. The tape is rebuilt on
every training step (define-by-run), so control flow in model code needs
no special handling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tensor:
    """N-dimensional numeric array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is not None:
            if dtype not in DTYPES:
                raise ValueError(f"unsupported dtype {dtype!r} (use 'f32' or 'f64')")
            arr = arr.astype(DTYPES[dtype], copy=False)
        elif arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same buffer, cut off from any tape."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        """Explicit NaN/Inf check; raises on the first non-finite value."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; all routed through the recording ops below
    def __add__(self, other):   return add(self, other)
    def __radd__(self, other):  return add(other, self)
    def __sub__(self, other):   return sub(self, other)
    def __rsub__(self, other):  return sub(other, self)
    def __mul__(self, other):   return mul(self, other)
    def __rmul__(self, other):  return mul(other, self)
    def __truediv__(self, other):  return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self):          return neg(self)
    def __matmul__(self, other): return matmul(self, other)


def tensor_new(shape: Sequence[int], dtype: str = "f32", fill: str = "constant", *,
               value: float = 0.0, seed: Optional[int] = None,
               mean: float = 0.0, std: float = 1.0,
               low: float = 0.0, high: float = 1.0,
               requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Create a tensor with constant or seeded-random contents.

    `fill` is one of "constant", "uniform" (in [low, high)) or "normal".
    Random fills require an explicit seed and are bit-reproducible for a
    given (seed, shape, fill) triple.
    """
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"zero or negative extent in shape {shape}")
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r} (use 'f32' or 'f64')")
    np_dtype = DTYPES[dtype]
    if fill == "constant":
        data = np.full(shape, value, dtype=np_dtype)
    elif fill in ("uniform", "normal"):
        if seed is None:
            raise ValueError(f"seed required for fill={fill!r}")
        gen = np.random.Generator(np.random.PCG64(seed))
        if fill == "uniform":
            data = gen.uniform(low, high, size=shape).astype(np_dtype)
        else:
            data = gen.normal(mean, std, size=shape).astype(np_dtype)
    else:
        raise ValueError(f"unknown fill {fill!r}")
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    backward_fn: Callable[[np.ndarray], tuple]


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations; one per training step.

    Used as a context manager: ops executed inside the `with` block whose
    inputs require gradients are recorded, in execution order (already a
    topological order of the acyclic graph).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)

    def first_nonfinite(self) -> Optional[str]:
        """Name of the earliest recorded op whose output is non-finite."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                label = node.out.name or node.op
                return f"{label} (op #{i})"
        return None


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def record(op: str, inputs: tuple, out: Tensor,
           backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Attach `out` to the active tape when any input carries gradients."""
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything `loss` depends on.

    Every requires-grad tensor appearing on the tape gets a zeroed grad
    buffer first; tensors actually on the path to `loss` then accumulate
    their true gradients. Raises if the tape is empty, the loss is not
    scalar, or the loss was not computed on this tape.
    """
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    producer = {id(node.out): node for node in tape.nodes}
    if id(loss) not in producer:
        raise ValueError("loss was not computed on this tape")

    # reachable sub-graph, walking producers backwards from the loss
    reachable: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable.add(id(t))
        node = producer.get(id(t))
        if node is not None:
            for inp in node.inputs:
                if isinstance(inp, Tensor):
                    stack.append(inp)

    # leaves start at zero (off-path ones stay there); intermediates get
    # their buffers lazily as contributions arrive
    for node in tape.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                t.grad = np.zeros_like(t.data) if id(t) not in producer else None
        if node.out.requires_grad:
            node.out.grad = None

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if id(node.out) not in reachable or node.out.grad is None:
            continue
        grads = node.backward_fn(node.out.grad)
        for t, g in zip(node.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            # first contribution may alias the producing node's buffer, so
            # accumulation always allocates instead of mutating in place
            t.grad = g if t.grad is None or not t.grad.any() else t.grad + g


# ---------------------------------------------------------------------------
# primitive ops


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    if isinstance(b, Tensor):
        return _wrap(a, b), b
    return _wrap(a), _wrap(b)


def _check_dtypes(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_dtypes("add", a, b)
    out = Tensor(a.data + b.data)
    def bwd(g):
        return unbroadcast(g, a.data.shape), unbroadcast(g, b.data.shape)
    return record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_dtypes("sub", a, b)
    out = Tensor(a.data - b.data)
    def bwd(g):
        return unbroadcast(g, a.data.shape), unbroadcast(-g, b.data.shape)
    return record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_dtypes("mul", a, b)
    out = Tensor(a.data * b.data)
    def bwd(g):
        return unbroadcast(g * b.data, a.data.shape), unbroadcast(g * a.data, b.data.shape)
    return record("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_dtypes("div", a, b)
    out = Tensor(a.data / b.data)
    def bwd(g):
        ga = unbroadcast(g / b.data, a.data.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return record("div", (a, b), out, bwd)


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return record("neg", (x,), out, lambda g: (-g,))


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    def bwd(g):
        return (g / (2.0 * out.data),)
    return record("sqrt", (x,), out, bwd)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return record("exp", (x,), out, lambda g: (g * out.data,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return record("log", (x,), out, lambda g: (g / x.data,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_dtypes("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    def bwd(g):
        return g @ b.data.T, a.data.T @ g
    return record("matmul", (a, b), out, bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)
    return record("sum", (x,), out, bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.data.shape).copy(),)
    return record("mean", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record("reshape", (x,), out, lambda g: (g.reshape(x.data.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]
    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))
    return record("concat", tuple(tensors), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis, differentiable."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())
    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)
    return record("narrow", (x,), out, bwd)


def take_channels(x: Tensor, channels) -> Tensor:
    """Select a subset of channels (axis 1) by index, differentiable."""
    channels = np.asarray(channels, dtype=np.int64)
    out = Tensor(x.data[:, channels].copy())
    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, channels] = g
        return (full,)
    return record("take_channels", (x,), out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    num_elements: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status} (max_rel_err={self.max_rel_err:.3e}, n={self.num_elements})"


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the autodiff gradient of scalar-valued `f` at `x` against
    central finite differences.

    Requires f64 input: f32 differences are too noisy at tol 1e-4. Where
    the analytic gradient is below 1e-8 in magnitude the absolute error is
    used instead of the relative one.
    """
    if x.dtype != "f64":
        raise TypeError("grad_check requires an f64 tensor")

    with Tape() as tape:
        out = f(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        backward(out, tape)
    if x.grad is None:
        raise ValueError("f does not depend on x (no gradient reached it)")
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)

    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.where(np.abs(analytic) < 1e-8, diff, diff / np.maximum(scale, 1e-300))
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol,
                           num_elements=int(flat.size))
