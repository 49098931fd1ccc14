"""Minimal dense-array engine with reverse-mode gradients.

Every operation computes its forward value with numpy and carries a
hand-written backward closure. Calling :meth:`Tensor.backward` walks the
recorded graph in reverse topological order.

Values are float32. The finite-difference oracle temporarily switches the
engine to float64 through :func:`precision`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.float32, "grad": True}


class ShapeError(ValueError):
    """Raised for incompatible or invalid tensor shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def precision(dtype):
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def default_dtype():
    return _state["dtype"]


class Tensor:
    """Dense array with an optional gradient buffer.

    ``data`` is a row-major numpy array; ``grad`` is populated on leaf
    tensors with ``requires_grad=True`` by :meth:`backward` and accumulates
    across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=_state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default: ones) to every leaf that requires it."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        order = _topological(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.op!r}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        for parent in it:
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            order.append(node)
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteError(f"{op} produced a non-finite value at index {tuple(int(i) for i in bad)}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * inside,), "clip")


_UNARY = {
    "abs": abs_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "sqrt": sqrt,
    "square": square,
    "log": log,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
ELEMENTWISE_KINDS = tuple(_BINARY) + tuple(_UNARY)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} takes one operand")
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {ELEMENTWISE_KINDS}")


# ---------------------------------------------------------------- structure


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, backward, "concat")


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=axis is not None))

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    if axis is None:
        out = out.reshape(1)
        return _make(out, (a,), lambda g: (np.full(a.shape, g[0], dtype=a.data.dtype),), "sum")
    return _make(out, (a,), backward, "sum")


def mean(a) -> Tensor:
    """Mean over all elements, returned with shape ``(1,)``."""
    a = as_tensor(a)
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype).reshape(1)
    return _make(out, (a,), lambda g: (np.full(a.shape, g[0] / n, dtype=a.data.dtype),), "mean")


# ---------------------------------------------------------------- dense ops


def linear(x, w, b=None) -> Tensor:
    """Affine map ``w @ x + b`` for a vector ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {w.shape} incompatible with input {x.shape}")
    parents = [x, w]
    out = w.data @ x.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents.append(b)

    def backward(g):
        grads = [w.data.T @ g, np.outer(g, x.data)]
        if b is not None:
            grads.append(g)
        return tuple(grads)

    return _make(out, parents, backward, "linear")


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        lo, hi = padding
    else:
        lo = hi = padding
    if lo < 0 or hi < 0:
        raise ShapeError(f"negative padding {padding}")
    return int(lo), int(hi)


def conv_output_size(n: int, k: int, stride: int, padding) -> int:
    lo, hi = _pad_pair(padding)
    span = n + lo + hi - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: ({n} + {lo} + {hi} - {k}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation of a ``C×H×W`` input with ``O×C×k×k`` weights.

    ``padding`` is an int (same on every side) or a ``(before, after)``
    pair applied to both spatial axes. Zero padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected C×H×W input and O×C×k×k weight, got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: weight expects {ci} input channels, input has {c}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}×{k2}")
    lo, hi = _pad_pair(padding)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (lo, hi), (lo, hi))) if lo or hi else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    w2 = w.data.reshape(o, c * k * k)
    out = w2 @ cols
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias {b.shape} != ({o},)")
        out = out + b.data[:, None]
        parents.append(b)
    out = out.reshape(o, ho, wo)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, ho, wo)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = dxp[:, lo : lo + h, lo : lo + wd]
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


def gap(x) -> Tensor:
    """Global average pooling ``C×H×W -> C``."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"gap: expected non-empty C×H×W, got {x.shape}")
    n = x.shape[1] * x.shape[2]
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to((g / n)[:, None, None], x.shape).copy(),)

    return _make(out, (x,), backward, "gap")


def identity_grid(h: int, w: int) -> np.ndarray:
    """``2×H×W`` array of absolute pixel coordinates, channel 0 = x, channel 1 = y."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([xs, ys]).astype(_state["dtype"])


def bilinear_sample(f, coords) -> Tensor:
    """Bilinearly sample ``f`` (C×H×W) at absolute ``(x, y)`` positions.

    ``coords`` is ``2×H'×W'``. Positions are clamped to the image before
    interpolation (border replicate). Differentiable in both arguments;
    the coordinate gradient is zero where clamping is active.
    """
    f, coords = as_tensor(f), as_tensor(coords)
    if f.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise ShapeError(f"bilinear_sample: expected C×H×W and 2×H'×W', got {f.shape}, {coords.shape}")
    _, h, w = f.shape
    x, y = coords.data[0], coords.data[1]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0f = np.floor(xc)
    y0f = np.floor(yc)
    wx = (xc - x0f).astype(f.data.dtype)
    wy = (yc - y0f).astype(f.data.dtype)
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fd = f.data
    v00, v01 = fd[:, y0, x0], fd[:, y0, x1]
    v10, v11 = fd[:, y1, x0], fd[:, y1, x1]
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        gf = gc = None
        if f.requires_grad:
            gf = np.zeros_like(fd)
            for yi, xi, wt in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                np.add.at(gf, (slice(None), yi, xi), g * wt)
        if coords.requires_grad:
            in_x = (x >= 0) & (x <= w - 1)
            in_y = (y >= 0) & (y <= h - 1)
            dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
            gc = np.stack([dx.sum(axis=0) * in_x, dy.sum(axis=0) * in_y]).astype(coords.data.dtype)
        return gf, gc

    return _make(out, (f, coords), backward, "bilinear_sample")


def box_filter(x, window: int) -> Tensor:
    """Uniform ``window×window`` local mean with border replication."""
    x = as_tensor(x)
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"box_filter: window must be odd and positive, got {window}")
    if x.ndim != 3:
        raise ShapeError(f"box_filter: expected C×H×W, got {x.shape}")
    r = window // 2
    _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)), mode="edge")
    rows = sliding_window_view(xp, window, axis=1).sum(axis=-1)
    out = sliding_window_view(rows, window, axis=2).sum(axis=-1) / (window * window)
    out = out.astype(x.data.dtype, copy=False)

    def backward(g):
        g = g / (window * window)
        gp = np.zeros((x.shape[0], h, w + 2 * r), dtype=g.dtype)
        for i in range(window):
            gp[:, :, i : i + w] += g
        gpp = np.zeros((x.shape[0], h + 2 * r, w + 2 * r), dtype=g.dtype)
        for i in range(window):
            gpp[:, i : i + h, :] += gp
        # fold the replicated border back onto the edge pixels
        gpp[:, r, :] += gpp[:, :r, :].sum(axis=1)
        gpp[:, r + h - 1, :] += gpp[:, r + h :, :].sum(axis=1)
        inner = gpp[:, r : r + h, :]
        inner[:, :, r] += inner[:, :, :r].sum(axis=2)
        inner[:, :, r + w - 1] += inner[:, :, r + w :].sum(axis=2)
        return (inner[:, :, r : r + w].copy(),)

    return _make(out, (x,), backward, "box_filter")


def finite_difference(x, axis: int) -> Tensor:
    """Central differences along a spatial axis (1 = rows/y, 2 = columns/x).

    One-sided differences are used on the first and last index.
    """
    x = as_tensor(x)
    if x.ndim != 3 or axis not in (1, 2):
        raise ShapeError(f"finite_difference: expected C×H×W and axis 1 or 2, got {x.shape}, {axis}")
    n = x.shape[axis]
    if n < 2:
        raise ShapeError(f"finite_difference: axis {axis} has length {n} < 2")
    d = np.moveaxis(x.data, axis, -1)
    out = np.empty_like(d)
    out[..., 1:-1] = (d[..., 2:] - d[..., :-2]) / 2
    out[..., 0] = d[..., 1] - d[..., 0]
    out[..., -1] = d[..., -1] - d[..., -2]
    out = np.moveaxis(out, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        gd = np.zeros_like(gm)
        half = gm[..., 1:-1] / 2
        gd[..., 2:] += half
        gd[..., :-2] -= half
        gd[..., 1] += gm[..., 0]
        gd[..., 0] -= gm[..., 0]
        gd[..., -1] += gm[..., -1]
        gd[..., -2] -= gm[..., -1]
        return (np.moveaxis(gd, -1, axis),)

    return _make(np.ascontiguousarray(out), (x,), backward, "finite_difference")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
