"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Record` is active are appended to it;
``Record.backward`` replays the tape in reverse and returns the gradient of
the final output with respect to every tensor that took part.

    >>> x = Tensor([1.0, 2.0, 3.0])
    >>> with Record() as rec:
    ...     y = reduce_sum(x * x)
    >>> rec.backward(y)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Record",
    "Gradients",
    "ShapeError",
    "RecordStateError",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "max_pool2d",
    "avg_pool2d",
    "flatten",
    "reshape",
    "softmax_cross_entropy",
    "maximum",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "take",
    "clamp",
    "log",
    "primitive",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class RecordStateError(RuntimeError):
    """Raised when a record is used after its backward pass consumed it."""


_ids = itertools.count()
_local = threading.local()


def _active() -> Record | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable n-dimensional float array with a unique node id."""

    __slots__ = ("data", "id")

    def __init__(self, data, dtype=None, *, _owned: bool = False):
        if not _owned:
            arr = np.array(data, dtype=dtype, copy=True)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data)
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Gradients(dict):
    """Mapping node id -> gradient array; indexing by Tensor is allowed.

    Tensors that appeared in the record but received no gradient flow map to
    zeros of their shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], shapes: dict[int, tuple]):
        super().__init__(grads)
        self._shapes = shapes

    def __getitem__(self, key):
        node = key.id if isinstance(key, Tensor) else key
        if dict.__contains__(self, node):
            return dict.__getitem__(self, node)
        if isinstance(key, Tensor):
            return np.zeros(key.shape, dtype=key.dtype)
        if node in self._shapes:
            return np.zeros(self._shapes[node])
        raise KeyError(node)


@dataclass
class Record:
    """Ordered tape of primitive applications (the computation record).

    Use as a context manager; records nest per thread and the innermost one
    receives new entries.
    """

    entries: list[_Entry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> Record:
        if self.consumed:
            raise RecordStateError("record already consumed by backward")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, output: Tensor | None = None, seed=None) -> Gradients:
        """Gradients of ``output`` (default: last recorded) seeded by ``seed``."""
        if self.consumed:
            raise RecordStateError("record already consumed by backward")
        if not self.entries:
            raise RecordStateError("cannot run backward over an empty record")
        if output is None:
            output = self.entries[-1].output
        if seed is None:
            seed = np.ones(output.shape, dtype=output.dtype)
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")

        grads: dict[int, np.ndarray] = {output.id: seed}
        shapes: dict[int, tuple] = {}
        for entry in reversed(self.entries):
            for t in entry.inputs:
                shapes.setdefault(t.id, t.shape)
            g_out = grads.get(entry.output.id)
            if g_out is None or entry.backward is None:
                continue
            for t, g in zip(entry.inputs, entry.backward(g_out)):
                if g is None:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(f"{entry.op}: gradient shape {g.shape} != input shape {t.shape}")
                if t.id in grads:
                    grads[t.id] = grads[t.id] + g
                else:
                    grads[t.id] = g
        self.consumed = True
        self.entries = []
        return Gradients(grads, shapes)


def primitive(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    """Wrap ``out`` as a Tensor and append the op to the active record."""
    result = Tensor(out, _owned=True)
    rec = _active()
    if rec is not None:
        rec.entries.append(_Entry(op, tuple(inputs), result, backward))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return primitive("add", (a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return primitive("sub", (a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    da, db = a.data, b.data
    return primitive("mul", (a, b), da * db,
                     lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return primitive("scalar-mul", (a,), (a.data * c).astype(a.dtype, copy=False), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    da, db = a.data, b.data
    return primitive("matmul", (a, b), da @ db, lambda g: (g @ db.T, da.T @ g))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``b``."""
    _broadcast_shape("elementwise-max", a, b)
    pick_a = a.data > b.data
    return primitive(
        "elementwise-max", (a, b), np.where(pick_a, a.data, b.data),
        lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                   _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
    )


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; gradient passes inside the interval, zero outside."""
    d = a.data
    inside = np.ones(d.shape, dtype=bool)
    if lo is not None:
        inside &= d >= lo
    if hi is not None:
        inside &= d <= hi
    return primitive("clamp", (a,), np.clip(d, lo, hi), lambda g: (np.where(inside, g, 0.0),))


def log(a: Tensor) -> Tensor:
    d = a.data
    if np.any(d <= 0):
        raise ValueError("log: input must be strictly positive")
    return primitive("log", (a,), np.log(d), lambda g: (g / d,))


# -- activations ------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    d = a.data
    return primitive("relu", (a,), np.maximum(d, 0), lambda g: (np.where(d > 0, g, 0.0),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    on = a.data > 0
    factor = np.where(on, 1.0, slope).astype(a.dtype, copy=False)
    return primitive("leaky-relu", (a,), a.data * factor, lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    d = a.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return primitive("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return primitive("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


# -- reductions and shape ---------------------------------------------------


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return primitive("reduce-sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    n = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return primitive("reduce-mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), back)


def reduce_max(a: Tensor, axis: int = -1) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    d = a.data
    idx = np.argmax(d, axis=axis)
    out = np.take_along_axis(d, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(d)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return primitive("reduce-max", (a,), out, back)


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    d = a.data
    out = np.array(d[index])

    def back(g):
        full = np.zeros_like(d)
        np.add.at(full, index, g)
        return (full,)

    return primitive("take", (a,), out, back)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return primitive("reshape", (a,), out, lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"flatten: expected a batched tensor, got shape {a.shape}")
    return primitive("flatten", (a,), a.data.reshape(a.shape[0], -1),
                     lambda g, s=a.shape: (g.reshape(s),))


# -- convolution and pooling -------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), w: (F, C, kh, kw), b: (F,)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    # columns laid out (kh, kw, C, N, Ho, Wo) so each offset is one block copy
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(f, -1)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(f, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        dw = (g2 @ cols.T).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        dcols = (wmat.T @ g2).reshape(kh, kw, c, n, ho, wo)
        dxp = np.zeros((c, n) + xp.shape[2:], dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        dx = dxp.transpose(1, 0, 2, 3)
        if pad:
            dx = dx[:, :, pad:pad + h, pad:pad + wd]
        dx = np.ascontiguousarray(dx)
        return (dx, np.ascontiguousarray(dw), g2.sum(axis=1)) if b is not None else (dx, np.ascontiguousarray(dw))

    inputs = (x, w, b) if b is not None else (x, w)
    return primitive("conv2d", inputs, out, back)


def _pool_views(d: np.ndarray, size: int, stride: int):
    n, c, h, w = d.shape
    if h < size or w < size:
        raise ShapeError(f"pool: window {size} larger than input {d.shape}")
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [d[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] for i, j in offsets]
    return offsets, views, ho, wo


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximal entry of a window."""
    if x.data.ndim != 4:
        raise ShapeError(f"max-pool2d: expected (N, C, H, W), got {x.shape}")
    stride = stride or size
    offsets, views, ho, wo = _pool_views(x.data, size, stride)
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(hit, g, 0.0)
        return (dx,)

    return primitive("max-pool2d", (x,), out, back)


def avg_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg-pool2d: expected (N, C, H, W), got {x.shape}")
    stride = stride or size
    offsets, views, ho, wo = _pool_views(x.data, size, stride)
    out = views[0].copy()
    for v in views[1:]:
        out += v
    out /= size * size

    def back(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        share = g / (size * size)
        for i, j in offsets:
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
        return (dx,)

    return primitive("avg-pool2d", (x,), out, back)


# -- losses -----------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax-cross-entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("softmax-cross-entropy: label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return ((p * (g / z.shape[0])).astype(z.dtype),)

    return primitive("softmax-cross-entropy", (logits,), np.asarray(loss, dtype=z.dtype), back)


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "scalar-mul": scale, "matmul": matmul,
    "conv2d": conv2d, "relu": relu, "leaky-relu": leaky_relu, "sigmoid": sigmoid,
    "tanh": tanh, "max-pool2d": max_pool2d, "avg-pool2d": avg_pool2d,
    "flatten": flatten, "reshape": reshape,
    "softmax-cross-entropy": softmax_cross_entropy, "elementwise-max": maximum,
    "reduce-sum": reduce_sum, "reduce-mean": reduce_mean, "reduce-max": reduce_max,
    "take": take, "clamp": clamp, "log": log,
}
