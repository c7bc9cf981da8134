"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records a :class:`Node` on its output when gradients are
enabled and at least one input requires them. ``backward`` collects the
nodes reachable from a scalar loss into a :class:`Tape` (ordered by
creation, which is a topological order) and replays it in reverse.

The graph is rebuilt on every forward pass; there is no caching.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
SOFTPLUS_THRESHOLD = 20.0
GRAD_CLIP = 10.0

_counter = itertools.count()


class AutogradError(RuntimeError):
    """Misuse of the tape (non-scalar loss, consumed graph, ...)."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class _Flags:
    grad_enabled: bool = True
    debug: bool = False
    clip_enabled: bool = True


_flags = _Flags()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording anything on the tape."""
    prev = _flags.grad_enabled
    _flags.grad_enabled = False
    try:
        yield
    finally:
        _flags.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Reject non-finite primitive inputs while active."""
    prev = _flags.debug
    _flags.debug = enabled
    try:
        yield
    finally:
        _flags.debug = prev


@contextlib.contextmanager
def grad_clipping(enabled: bool) -> Iterator[None]:
    """Toggle the backward clipping of ``clip_grad_by_value``.

    Finite-difference checks measure the true derivative, so they run with
    clipping disabled; the clipping rule itself is tested separately.
    """
    prev = _flags.clip_enabled
    _flags.clip_enabled = enabled
    try:
        yield
    finally:
        _flags.clip_enabled = prev


def is_grad_enabled() -> bool:
    return _flags.grad_enabled


class Node:
    """One recorded primitive: inputs, output and its backward rule."""

    __slots__ = ("kind", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_counter)
        self.consumed = False


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, node: Node | None) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = node is not None
        t.grad = None
        t._node = node
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return None if self._node is None else self._node.seq

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy cut from the tape.

        The array is shared, which is safe because optimizers rebind
        ``data`` instead of writing into it.
        """
        return Tensor._wrap(self.data, None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def square(self):
        return square(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _check_finite(kind: str, arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{kind}: non-finite input detected")


def _record(kind: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if _flags.grad_enabled:
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                return Tensor._wrap(out, Node(kind, inputs, backward_fn))
    return Tensor._wrap(out, None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape_of(x) -> tuple:
    return np.shape(_val(x))


def _binary_fail(kind: str, a, b, err: Exception) -> ShapeError:
    return ShapeError(f"{kind}: incompatible shapes {_shape_of(a)} and {_shape_of(b)} ({err})")


# --------------------------------------------------------------------------
# elementwise binary ops (trailing-dimension broadcasting)


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if _flags.debug:
        _check_finite("add", (av, bv))
    try:
        out = av + bv
    except ValueError as err:
        raise _binary_fail("add", a, b, err) from None
    sa, sb = np.shape(av), np.shape(bv)
    return _record("add", np.asarray(out, dtype=np.float64), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if _flags.debug:
        _check_finite("sub", (av, bv))
    try:
        out = av - bv
    except ValueError as err:
        raise _binary_fail("sub", a, b, err) from None
    sa, sb = np.shape(av), np.shape(bv)
    return _record("sub", np.asarray(out, dtype=np.float64), (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if _flags.debug:
        _check_finite("mul", (av, bv))
    try:
        out = av * bv
    except ValueError as err:
        raise _binary_fail("mul", a, b, err) from None
    sa, sb = np.shape(av), np.shape(bv)
    return _record("mul", np.asarray(out, dtype=np.float64), (a, b),
                   lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if _flags.debug:
        _check_finite("div", (av, bv))
    try:
        out = av / bv
    except ValueError as err:
        raise _binary_fail("div", a, b, err) from None
    sa, sb = np.shape(av), np.shape(bv)

    def back(g):
        gb = None
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(-g * out / bv, sb)
        return _unbroadcast(g / bv, sa), gb

    return _record("div", np.asarray(out, dtype=np.float64), (a, b), back)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    try:
        out = np.minimum(av, bv)
    except ValueError as err:
        raise _binary_fail("minimum", a, b, err) from None
    pick_a = np.asarray(av <= bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _record("minimum", np.asarray(out, dtype=np.float64), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {np.shape(av)} and {np.shape(bv)}")
    if _flags.debug:
        _check_finite("matmul", (av, bv))
    try:
        out = av @ bv
    except ValueError as err:
        raise _binary_fail("matmul", a, b, err) from None
    sa, sb = av.shape, bv.shape

    def back(g):
        ga = gb = None
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)
        return ga, gb

    return _record("matmul", out, (a, b), back)


# --------------------------------------------------------------------------
# elementwise unary ops


def negate(x) -> Tensor:
    return _record("negate", -_val(x), (x,), lambda g: (-g,))


def square(x) -> Tensor:
    xv = _val(x)
    if _flags.debug:
        _check_finite("square", (xv,))
    return _record("square", xv * xv, (x,), lambda g: (2.0 * g * xv,))


def exp(x) -> Tensor:
    xv = _val(x)
    if _flags.debug:
        _check_finite("exp", (xv,))
    out = np.exp(xv)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    xv = _val(x)
    if _flags.debug:
        _check_finite("log", (xv,))
    return _record("log", np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x) -> Tensor:
    xv = _val(x)
    if _flags.debug:
        _check_finite("tanh", (xv,))
    out = np.tanh(xv)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def _softplus_np(xv: np.ndarray) -> np.ndarray:
    xv = np.asarray(xv, dtype=np.float64)
    out = np.log1p(np.exp(np.minimum(xv, SOFTPLUS_THRESHOLD)))
    big = xv > SOFTPLUS_THRESHOLD
    if np.any(big):
        out = np.where(big, xv + np.log1p(np.exp(-np.abs(xv))), out)
    return out


def softplus(x) -> Tensor:
    """log(1 + e^x), switching to x + log(1 + e^-x) above 20."""
    xv = _val(x)
    if _flags.debug:
        _check_finite("softplus", (xv,))
    return _record("softplus", _softplus_np(xv), (x,), lambda g: (g * expit(xv),))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    xv = _val(x)
    if _flags.debug:
        _check_finite("leaky_relu", (xv,))
    out = np.maximum(xv, xv * slope) if slope <= 1.0 else np.where(xv > 0, xv, xv * slope)
    return _record("leaky_relu", out, (x,), lambda g: (np.where(xv > 0, g, g * slope),))


def clip_grad_by_value(x, bound: float = GRAD_CLIP) -> Tensor:
    """Identity forward; the backward signal is clipped to [-bound, bound]."""
    xv = _val(x)

    def back(g):
        if _flags.clip_enabled:
            return (np.clip(g, -bound, bound),)
        return (g,)

    return _record("clip_grad_by_value", xv, (x,), back)


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _val(x)
    shape = xv.shape
    axes = _norm_axes(axis, xv.ndim)
    out = np.asarray(xv.sum(axis=axes, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", out, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    xv = _val(x)
    shape = xv.shape
    axes = _norm_axes(axis, xv.ndim)
    n = 1
    for a in axes:
        n *= shape[a]
    out = np.asarray(xv.mean(axis=axes, keepdims=keepdims))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape),)

    return _record("mean", out, (x,), back)


def broadcast_to(x, shape) -> Tensor:
    xv = _val(x)
    try:
        out = np.broadcast_to(xv, shape)
    except ValueError as err:
        raise ShapeError(f"broadcast: cannot broadcast {xv.shape} to {tuple(shape)} ({err})") from None
    src = xv.shape
    return _record("broadcast", np.array(out), (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape) -> Tensor:
    xv = _val(x)
    try:
        out = xv.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {xv.shape} to {tuple(shape)} ({err})") from None
    src = xv.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_(x, index) -> Tensor:
    xv = _val(x)
    try:
        out = xv[index]
    except IndexError as err:
        raise ShapeError(f"slice: index {index!r} invalid for shape {xv.shape} ({err})") from None
    shape = xv.shape
    advanced = _has_advanced(index)

    def back(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record("slice", np.asarray(out), (x,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    vals = [_val(t) for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as err:
        shapes = [np.shape(v) for v in vals]
        raise ShapeError(f"concat: incompatible shapes {shapes} ({err})") from None
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence, axis: int = 1) -> Tensor:
    """Stack equally shaped tensors along a new axis (reshape + concat)."""
    parts = []
    for t in tensors:
        shape = list(_shape_of(t))
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        parts.append(reshape(t, tuple(shape)))
    return concat(parts, axis=axis)


# --------------------------------------------------------------------------
# stride-2 convolutions for the tiny-image path (NCHW, square kernels)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)


def _conv_grad_weight(g: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwij,nohw->ocij", win, g, optimize=True)


def _conv_grad_input(g: np.ndarray, w: np.ndarray, in_shape: tuple, stride: int, pad: int) -> np.ndarray:
    n, c, h, wd = in_shape
    k = w.shape[-1]
    out_h, out_w = g.shape[2], g.shape[3]
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += np.einsum(
                "nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
    return xp[:, :, pad:pad + h, pad:pad + wd]


def conv2d(x, w, stride: int = 2, pad: int = 1) -> Tensor:
    """x: (N, C, H, W), w: (O, C, k, k)."""
    xv, wv = _val(x), _val(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {xv.shape} and {wv.shape}")
    out = _conv_forward(xv, wv, stride, pad)
    k = wv.shape[-1]

    def back(g):
        gx = gw = None
        if isinstance(x, Tensor) and x.requires_grad:
            gx = _conv_grad_input(g, wv, xv.shape, stride, pad)
        if isinstance(w, Tensor) and w.requires_grad:
            gw = _conv_grad_weight(g, xv, k, stride, pad)
        return gx, gw

    return _record("conv2d", out, (x, w), back)


def conv_transpose2d(x, w, stride: int = 2, pad: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` in its input. x: (N, C, H, W), w: (C, O, k, k)."""
    xv, wv = _val(x), _val(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {xv.shape} and {wv.shape}")
    k = wv.shape[-1]
    n, _, h, wd = xv.shape
    out_shape = (n, wv.shape[1], (h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k)
    out = _conv_grad_input(xv, wv, out_shape, stride, pad)

    def back(g):
        gx = gw = None
        if isinstance(x, Tensor) and x.requires_grad:
            gx = _conv_forward(g, wv, stride, pad)
        if isinstance(w, Tensor) and w.requires_grad:
            gw = _conv_grad_weight(xv, g, k, stride, pad)
        return gx, gw

    return _record("conv_transpose2d", out, (x, w), back)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softplus": softplus,
    "leaky_relu": leaky_relu,
    "sum": sum_,
    "mean": mean,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "square": square,
    "negate": negate,
    "clip_grad_by_value": clip_grad_by_value,
    "minimum": minimum,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    if op_kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# tape replay


class Tape:
    """Ops reachable from one loss, in creation (topological) order."""

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.ops = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[tuple[Tensor, Node]] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((t, node))
            for inp in node.inputs:
                if isinstance(inp, Tensor) and inp._node is not None:
                    stack.append(inp)
        found.sort(key=lambda item: item[1].seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.ops)

    def kinds(self) -> list[str]:
        return [node.kind for _, node in self.ops]

    def run(self, loss: Tensor) -> None:
        for _, node in self.ops:
            if node.consumed:
                raise AutogradError("backward through a tape that was already consumed")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for out, node in reversed(self.ops):
            g = grads.pop(id(out), None)
            node.consumed = True
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            node.backward_fn = _consumed_rule
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._node is None:
                    prev = leaves.get(key)
                    leaves[key] = (inp, gi if prev is None else prev[1] + gi)
                else:
                    prev_g = grads.get(key)
                    grads[key] = gi if prev_g is None else prev_g + gi
        for leaf, g in leaves.values():
            g = np.array(g, dtype=np.float64).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _consumed_rule(g):
    raise AutogradError("backward through a tape that was already consumed")


def backward(loss: Tensor) -> Tape:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise AutogradError("backward expects a Tensor")
    if loss.data.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return Tape([])
        raise AutogradError("loss is not connected to any tensor requiring grad")
    if loss._node.consumed:
        raise AutogradError("backward through a tape that was already consumed")
    tape = Tape.from_loss(loss)
    tape.run(loss)
    return tape


# --------------------------------------------------------------------------
# finite-difference verification


def gradient(f: Callable[[Tensor], Tensor], point) -> np.ndarray:
    x = Tensor(np.array(_val(point), dtype=np.float64), requires_grad=True)
    backward(f(x))
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if h <= 0:
        raise ValueError("step size must be positive")
    base = np.array(_val(point), dtype=np.float64)
    analytic = gradient(f, base)
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += h
            xm[i] -= h
            fp = float(f(Tensor(xp.reshape(base.shape))).data)
            fm = float(f(Tensor(xm.reshape(base.shape))).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {i}")
            fd = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """grad_check for a loss of many parameter tensors.

    ``loss_fn`` must be deterministic (fixed noise). When ``n_coords`` is
    given, that many coordinates are drawn uniformly over all parameters.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    entries = [(name, i) for name, p in params.items() for i in range(p.size)]
    if n_coords is not None and n_coords < len(entries):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(entries), size=n_coords, replace=False)
        entries = [entries[j] for j in sorted(picks)]
    worst = 0.0
    with no_grad():
        for name, i in entries:
            p = params[name]
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
            orig = p.data
            vals = []
            for step in (h, -h):
                bumped = orig.copy()
                bumped.reshape(-1)[i] += step
                p.data = bumped
                vals.append(float(loss_fn().data))
            p.data = orig
            if not all(np.isfinite(vals)):
                raise NonFiniteError(f"loss is non-finite near {name}[{i}]")
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    for p in params.values():
        p.grad = None
    return worst


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState, lr: float) -> bool:
    """One bias-corrected Adam update. Returns False if skipped for NaN gradients."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            logger.warning("adam: non-finite gradient in %s, update skipped", name)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + EPS)
    return True


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float):
        self.params = dict(params)
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        grads = {name: p.grad for name, p in self.params.items()}
        return adam_step(self.params, grads, self.state, self.lr)

    def minimize(self, loss: Tensor) -> bool:
        self.zero_grad()
        backward(loss)
        return self.step()


def parameters_of(*named: Iterable[tuple[str, Tensor]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for group in named:
        out.update(dict(group))
    return out
