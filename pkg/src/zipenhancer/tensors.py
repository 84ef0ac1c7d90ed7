"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure that maps the
output gradient to input gradients. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and then releases it; a second call
on the same graph raises :class:`GraphError`.

Conventions
-----------
* Broadcasting follows numpy's trailing-dimension rule (size-1 axes stretch).
  Gradients are summed back to each operand's own shape.
* ``conv2d`` is a cross-correlation (no kernel flip), inputs are laid out
  ``[..., C_in, H, W]``.
* Precision: arrays are created in the module default dtype, float64 unless
  changed with :func:`set_default_dtype` or :func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GraphError", "ShapeError", "no_grad", "is_grad_enabled",
    "precision", "set_default_dtype", "get_default_dtype", "tensor",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "tanh",
    "sigmoid", "silu", "sqrt", "absolute", "relu", "clip", "cos", "sin",
    "atan2", "complex_abs", "anti_wrap", "prelu", "softmax", "glu",
    "matmul", "linear", "conv2d", "depthwise_conv1d", "sub_pixel",
    "inverse_sub_pixel", "instance_norm", "concat", "pad", "reflect_pad",
    "repeat_frames", "take", "frame", "overlap_add", "tensor_sum",
    "tensor_mean", "reshape", "transpose",
]


class GraphError(RuntimeError):
    """Misuse of the recorded graph (double backward, non-scalar loss)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True
_NAN_CHECK = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``"float32"`` or ``"float64"``)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_nan_check(enabled: bool) -> None:
    global _NAN_CHECK
    _NAN_CHECK = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._released = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` of every ``requires_grad`` leaf reachable from here.

        Gradients accumulate (sum) into existing leaf ``.grad`` buffers. The
        graph is released afterwards.
        """
        if self._released:
            raise GraphError("backward called twice on the same graph")
        if grad is None:
            if self.data.size != 1:
                raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                input_grads = node._backward(g)
                for parent, pg in zip(node._parents, input_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
            node._backward = None
            node._parents = ()
            node._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_nan(out: np.ndarray, inputs: Sequence[np.ndarray], op: str) -> None:
    if not _NAN_CHECK or out.dtype.kind != "f":
        return
    if np.isfinite(out.sum()):
        return
    if np.isnan(out).any() and all(np.isfinite(a).all() for a in inputs):
        raise FloatingPointError(f"{op} produced NaN from finite inputs")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_nan(out, [p.data for p in parents], op)
    t = Tensor(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t._op = op
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a} and {b} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def atan2(y, x) -> Tensor:
    """Elementwise ``atan2(y, x)`` in (-pi, pi]; ``atan2(0, 0)`` is 0.

    The gradient uses ``max(x^2 + y^2, 1e-12)`` as denominator so the origin
    stays finite.
    """
    y = _as_tensor(y, x if isinstance(x, Tensor) else None)
    x = _as_tensor(x, y)
    out = np.arctan2(y.data, x.data)
    out = np.where(out == -np.pi, np.pi, out)

    def backward(g):
        r2 = np.maximum(x.data * x.data + y.data * y.data, 1e-12)
        gy = _unbroadcast(g * x.data / r2, y.shape) if y.requires_grad else None
        gx = _unbroadcast(-g * y.data / r2, x.shape) if x.requires_grad else None
        return gy, gx

    return _make(out, (y, x), backward, "atan2")


def complex_abs(re, im, eps: float = 1e-12) -> Tensor:
    """``sqrt(re^2 + im^2)`` with a gradient floored at magnitude ``sqrt(eps)``."""
    re = _as_tensor(re)
    im = _as_tensor(im, re)
    out = np.sqrt(re.data * re.data + im.data * im.data)

    def backward(g):
        denom = np.maximum(out, np.sqrt(eps))
        scale = g / denom
        gr = _unbroadcast(scale * re.data, re.shape) if re.requires_grad else None
        gi = _unbroadcast(scale * im.data, im.shape) if im.requires_grad else None
        return gr, gi

    return _make(out, (re, im), backward, "complex_abs")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float, grad_floor: float = 0.0) -> Tensor:
    """``a ** exponent`` for a scalar exponent.

    ``grad_floor`` > 0 evaluates the derivative at ``max(a, grad_floor)``,
    which keeps fractional powers differentiable at 0.
    """
    a = _as_tensor(a)
    p = float(exponent)
    out = np.power(a.data, p)

    def backward(g):
        base = np.maximum(a.data, grad_floor) if grad_floor > 0 else a.data
        if p == 2.0:
            return (g * 2.0 * base,)
        return (g * p * np.power(base, p - 1.0),)

    return _make(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(x/2)) avoids overflow warnings for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    """Swish activation ``x * sigmoid(x)``."""
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s

    def backward(g):
        return (g * (s + out * (1.0 - s)),)

    return _make(out, (a,), backward, "silu")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes where ``lo <= a <= hi``."""
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def anti_wrap(a) -> Tensor:
    """Wrapped phase distance ``|a - 2*pi*round(a / 2*pi)|``, range [0, pi]."""
    a = _as_tensor(a)
    two_pi = 2.0 * np.pi
    wrapped = a.data - two_pi * np.round(a.data / two_pi)
    return _make(np.abs(wrapped), (a,), lambda g: (g * np.sign(wrapped),), "anti_wrap")


def prelu(x, slope, axis: int = -1) -> Tensor:
    """Parametric ReLU with one learnable slope per entry along ``axis``."""
    x = _as_tensor(x)
    slope = _as_tensor(slope, x)
    axis = axis % x.ndim
    shape = [1] * x.ndim
    shape[axis] = -1
    a = slope.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def backward(g):
        gx = g * np.where(pos, 1.0, a)
        gs = None
        if slope.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != axis)
            gs = np.where(pos, 0.0, g * x.data).sum(axis=red).reshape(slope.shape)
        return gx, gs

    return _make(out, (x, slope), backward, "prelu")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def glu(x, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of second half."""
    x = _as_tensor(x)
    n = x.shape[axis]
    if n % 2:
        raise ShapeError(f"glu needs an even extent along axis {axis}, got {n}")
    a, b = np.split(x.data, 2, axis=axis)
    s = _sigmoid_np(b)
    out = a * s

    def backward(g):
        return (np.concatenate([g * s, g * out * (1.0 - s)], axis=axis),)

    return _make(out, (x,), backward, "glu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def pad(a, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad with explicit ``(before, after)`` amounts per axis."""
    a = _as_tensor(a)
    widths = [tuple(w) for w in widths]
    if len(widths) < a.ndim:
        widths = [(0, 0)] * (a.ndim - len(widths)) + widths
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


def reflect_pad(a, left: int, right: int) -> Tensor:
    """Reflect-pad the last axis (edge sample not repeated)."""
    a = _as_tensor(a)
    n = a.shape[-1]
    if left >= n or right >= n:
        raise ShapeError(f"reflect padding {left},{right} needs length > pad, got {n}")
    idx = np.concatenate([np.arange(left, 0, -1), np.arange(n), np.arange(n - 2, n - 2 - right, -1)])
    out = a.data[..., idx]

    def backward(g):
        full = np.zeros(g.shape[:-1] + (n,), dtype=g.dtype)
        flat_g = g.reshape(-1, g.shape[-1])
        flat_full = full.reshape(-1, n)
        for j, src in enumerate(idx):
            flat_full[:, src] += flat_g[:, j]
        return (full,)

    return _make(out, (a,), backward, "reflect_pad")


def repeat_frames(a, r: int, axis: int, target_len: int) -> Tensor:
    """Repeat every slice along ``axis`` ``r`` times, then truncate to ``target_len``."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if n * r < target_len:
        raise ShapeError(f"cannot reach length {target_len} repeating {n} frames {r} times")
    out = np.repeat(a.data, r, axis=axis)
    out = np.take(out, np.arange(target_len), axis=axis)

    def backward(g):
        padded_len = n * r
        if target_len < padded_len:
            widths = [(0, 0)] * g.ndim
            widths[axis] = (0, padded_len - target_len)
            g = np.pad(g, widths)
        shape = list(g.shape)
        shape[axis:axis + 1] = [n, r]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make(out, (a,), backward, "repeat_frames")


def take(table, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather ``table`` entries along ``axis`` with an integer index array."""
    table = _as_tensor(table)
    axis = axis % table.ndim
    index = np.asarray(index)
    out = np.take(table.data, index, axis=axis)

    def backward(g):
        n = table.shape[axis]
        lead = table.shape[:axis]
        gm = g.reshape(int(np.prod(lead, dtype=int)), index.size, -1)
        flat = index.reshape(-1)
        full = np.zeros((gm.shape[0], n, gm.shape[2]), dtype=g.dtype)
        for i in range(gm.shape[0]):
            for k in range(gm.shape[2]):
                full[i, :, k] = np.bincount(flat, weights=gm[i, :, k], minlength=n)
        return (full.reshape(table.shape),)

    return _make(out, (table,), backward, "take")


def frame(x, frame_len: int, hop: int) -> Tensor:
    """Slice the last axis into overlapping frames: ``[..., L] -> [..., T, frame_len]``."""
    x = _as_tensor(x)
    n = x.shape[-1]
    if n < frame_len:
        raise ShapeError(f"signal of length {n} shorter than frame {frame_len}")
    n_frames = (n - frame_len) // hop + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, frame_len, axis=-1)
    out = np.ascontiguousarray(windows[..., ::hop, :][..., :n_frames, :])

    def backward(g):
        return (_overlap_add_np(g, hop, n),)

    return _make(out, (x,), backward, "frame")


def _overlap_add_np(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    n_frames, frame_len = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (length,), dtype=frames.dtype)
    if hop >= frame_len:
        for t in range(n_frames):
            out[..., t * hop:t * hop + frame_len] += frames[..., t, :]
        return out
    # accumulate hop-sized chunks: frame_len/hop passes instead of n_frames
    chunks = -(-frame_len // hop)
    for c in range(chunks):
        lo = c * hop
        hi = min(lo + hop, frame_len)
        seg = frames[..., :, lo:hi]
        width = hi - lo
        region = out[..., lo:lo + n_frames * hop].reshape(frames.shape[:-2] + (n_frames, hop))
        region[..., :width] += seg
    return out


def overlap_add(frames, hop: int, length: int) -> Tensor:
    """Adjoint of :func:`frame`: sum frames placed every ``hop`` samples."""
    frames = _as_tensor(frames)
    n_frames, frame_len = frames.shape[-2:]
    if (n_frames - 1) * hop + frame_len > length:
        raise ShapeError("overlap_add output length too short for the frames")
    out = _overlap_add_np(frames.data, hop, length)

    def backward(g):
        windows = np.lib.stride_tricks.sliding_window_view(g, frame_len, axis=-1)
        return (np.ascontiguousarray(windows[..., ::hop, :][..., :n_frames, :]),)

    return _make(out, (frames,), backward, "overlap_add")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``[in, out]``."""
    x = _as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "linear")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_padding(padding) -> tuple[int, int, int, int]:
    """Normalize to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding,) * 4
    padding = tuple(int(p) for p in padding)
    if len(padding) == 2:
        return padding[0], padding[0], padding[1], padding[1]
    if len(padding) == 4:
        return padding
    raise ValueError(f"bad padding {padding}")


def conv2d(x, w, bias=None, stride=1, dilation=1, padding=0) -> Tensor:
    """2-D cross-correlation.

    ``x``: ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``w``: ``[C_out, C_in, kH, kW]``.
    ``padding`` is an int, ``(pH, pW)`` or ``(top, bottom, left, right)``
    explicit zero padding. Output extent per axis is
    ``floor((n + pads - dilation*(k-1) - 1) / stride) + 1``.
    """
    x = _as_tensor(x)
    w = _as_tensor(w, x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] input and 4-D kernel, got {x.shape}, {w.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = w.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    pt, pb, pl, pr = _conv_padding(padding)
    Hp, Wp = H + pt + pb, W + pl + pr
    span_h, span_w = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    if span_h > Hp or span_w > Wp:
        raise ShapeError(f"conv2d kernel span ({span_h},{span_w}) exceeds padded input ({Hp},{Wp})")
    Ho, Wo = (Hp - span_h) // sh + 1, (Wp - span_w) // sw + 1
    parents = (x, w) if bias is None else (x, w, bias)
    if sh == 1 and sw == 1:
        return _conv2d_taps(x, w, bias, parents, squeeze, (dh, dw), (pt, pb, pl, pr), (Ho, Wo))
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd

    def tap(i, j):
        return (slice(None), slice(None),
                slice(i * dh, i * dh + sh * (Ho - 1) + 1, sh),
                slice(j * dw, j * dw + sw * (Wo - 1) + 1, sw))

    # im2col, channel-major: [C*kh*kw, B, Ho*Wo] so each pass is one GEMM
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[tap(i, j)].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * kh * kw, B * Ho * Wo)
    wmat = w.data.reshape(O, C * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = out[0].copy() if squeeze else np.ascontiguousarray(out)

    def backward(g):
        g2 = (g[None] if squeeze else g).transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = gb = gx = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[tap(i, j)] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pt:pt + H, pl:pl + W]
            gx = gx[0] if squeeze else np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, parents, backward, "conv2d")


def _conv2d_taps(x, w, bias, parents, squeeze, dil, pads, out_hw) -> Tensor:
    """Stride-1 conv as one GEMM over the padded grid followed by shifted tap sums.

    All ``kh*kw`` kernel taps are applied at once (``[taps*O, C] @ [C, B*Hp*Wp]``)
    and each tap's response is added at its offset, which avoids materializing
    an im2col matrix ``taps`` times larger than the input.
    """
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    O, _, kh, kw = w.shape
    dh, dw = dil
    pt, pb, pl, pr = pads
    Ho, Wo = out_hw
    Hp, Wp = H + pt + pb, W + pl + pr
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    xcm = np.zeros((C, B, Hp, Wp), dtype=xd.dtype)
    xcm[:, :, pt:pt + H, pl:pl + W] = xd.transpose(1, 0, 2, 3)
    xcm = xcm.reshape(C, B * Hp * Wp)
    wall = np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)).reshape(kh * kw * O, C)
    y = (wall @ xcm).reshape(kh * kw, O, B, Hp, Wp)
    out = np.empty((B, O, Ho, Wo), dtype=xd.dtype)
    acc = out.transpose(1, 0, 2, 3)
    for t, (i, j) in enumerate(taps):
        src = y[t, :, :, i * dh:i * dh + Ho, j * dw:j * dw + Wo]
        if t == 0:
            acc[...] = src
        else:
            acc += src
    if bias is not None:
        acc += bias.data[:, None, None, None]
    del y
    out = out[0] if squeeze else out

    def backward(g):
        g4 = (g[None] if squeeze else g).transpose(1, 0, 2, 3)
        gstack = np.zeros((kh * kw, O, B, Hp, Wp), dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gstack[t, :, :, i * dh:i * dh + Ho, j * dw:j * dw + Wo] = g4
        gstack = gstack.reshape(kh * kw * O, B * Hp * Wp)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gstack @ xcm.T).reshape(kh, kw, O, C).transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(1, 2, 3))
        if x.requires_grad:
            gxcm = (wall.T @ gstack).reshape(C, B, Hp, Wp)
            gx = np.ascontiguousarray(gxcm[:, :, pt:pt + H, pl:pl + W].transpose(1, 0, 2, 3))
            gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, parents, backward, "conv2d")


def depthwise_conv1d(x, w, bias=None, padding: int | None = None) -> Tensor:
    """Per-channel 1-D convolution along axis -2 of ``[..., S, C]``.

    ``w`` is ``[C, K]``; default padding ``(K-1)//2`` keeps the length.
    """
    x = _as_tensor(x)
    C, K = w.shape
    if x.shape[-1] != C:
        raise ShapeError(f"depthwise_conv1d: {x.shape[-1]} channels vs kernel {C}")
    p = (K - 1) // 2 if padding is None else int(padding)
    S = x.shape[-2]
    So = S + 2 * p - K + 1
    if So < 1:
        raise ShapeError("depthwise_conv1d kernel larger than padded input")
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-2] + (So, C), dtype=x.dtype)
    for k in range(K):
        out += xp[..., k:k + So, :] * w.data[:, k]
    if bias is not None:
        out += bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + So, :] += g * w.data[:, k]
            gx = gxp[..., p:p + S, :]
        if w.requires_grad:
            g2 = g.reshape(-1, So, C)
            x2 = xp.reshape(-1, xp.shape[-2], C)
            gw = np.stack([np.einsum("nsc,nsc->c", g2, x2[:, k:k + So, :]) for k in range(K)], axis=1)
        if bias is not None:
            gb = g.reshape(-1, C).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    return _make(out, parents, backward, "depthwise_conv1d")


def sub_pixel(x, s: int) -> Tensor:
    """Channel-to-width shuffle ``[..., C*s, H, W] -> [..., C, H, W*s]``.

    Output ``[c, h, w*s + j]`` takes input channel ``j*C + c``.
    """
    x = _as_tensor(x)
    cs, H, W = x.shape[-3:]
    if cs % s:
        raise ShapeError(f"sub_pixel: channel extent {cs} not divisible by {s}")
    C = cs // s
    lead = x.shape[:-3]
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n + 2, n + 3, n)
    out = x.data.reshape(lead + (s, C, H, W)).transpose(perm).reshape(lead + (C, H, W * s))

    def backward(g):
        return (_inverse_sub_pixel_np(g, s),)

    return _make(np.ascontiguousarray(out), (x,), backward, "sub_pixel")


def _inverse_sub_pixel_np(y: np.ndarray, s: int) -> np.ndarray:
    C, H, Ws = y.shape[-3:]
    if Ws % s:
        raise ShapeError(f"inverse_sub_pixel: width {Ws} not divisible by {s}")
    lead = y.shape[:-3]
    n = len(lead)
    # [.., C, H, W, s] -> [.., s, C, H, W]
    perm = tuple(range(n)) + (n + 3, n, n + 1, n + 2)
    out = y.reshape(lead + (C, H, Ws // s, s)).transpose(perm).reshape(lead + (C * s, H, Ws // s))
    return np.ascontiguousarray(out)


def inverse_sub_pixel(y, s: int) -> Tensor:
    y = _as_tensor(y)
    out = _inverse_sub_pixel_np(y.data, s)
    return _make(out, (y,), lambda g: (sub_pixel(Tensor(g), s).data,), "inverse_sub_pixel")


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize each ``[..., C, H, W]`` channel over (H, W), then affine."""
    x = _as_tensor(x)
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = xhat * weight.data[:, None, None] + bias.data[:, None, None]
    parents = (x,) if weight is None else (x, weight, bias)

    def backward(g):
        gw = gb = None
        gh = g
        if weight is not None:
            red = tuple(range(g.ndim - 3)) + (-2, -1)
            gw = (g * xhat).sum(axis=red)
            gb = g.sum(axis=red)
            gh = g * weight.data[:, None, None]
        gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        if weight is None:
            return (gx,)
        return gx, gw, gb

    return _make(out, parents, backward, "instance_norm")
