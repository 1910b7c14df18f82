"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every primitive op computes its forward value with numpy and, when any input
requires grad, appends a node to the active :class:`Tape`.  A node keeps the
arrays its backward closure needs; the tape sums their sizes into
``saved_scalars``, which is what the efficiency benchmark reports as memory.

Parameter leaves (tensors that require grad and were not produced by an op)
are never counted: they are resident regardless of sequence length.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


@dataclass(eq=False)
class Node:
    tape: "Tape"
    out: "Tensor"
    inputs: tuple
    backward: Callable
    saved_scalars: int


@dataclass
class Tape:
    """Ordered record of primitive ops for one forward pass."""

    nodes: list = field(default_factory=list)
    saved_scalars: int = 0
    consumed: bool = False

    def record(self, out, inputs, backward, saved) -> Node:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward()")
        n = _count_saved(saved)
        node = Node(self, out, tuple(inputs), backward, n)
        self.nodes.append(node)
        self.saved_scalars += n
        return node

    def release(self) -> None:
        """Drop recorded nodes, breaking tensor <-> node cycles so memory frees promptly."""
        for node in self.nodes:
            node.out.node = None
            node.inputs = ()
            node.backward = None
        self.nodes.clear()


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad_enabled = True
    return _state.tapes


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _state.grad_enabled


@contextlib.contextmanager
def recording():
    """Run the block against a fresh tape and yield it."""
    stack = _stack()
    tape = Tape()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.remove(tape)
        tape.release()


@contextlib.contextmanager
def no_grad():
    _stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _count_saved(saved) -> int:
    total = 0
    for item in saved:
        if item is None:
            continue
        if isinstance(item, Tensor):
            if item.is_parameter:
                continue
            total += item.data.size
        else:
            total += np.asarray(item).size
    return total


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biu" or (arr.dtype.kind == "f" and arr.dtype not in (np.float32, np.float64)):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self.name = name

    # -- introspection -------------------------------------------------
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
    def is_parameter(self) -> bool:
        return self.requires_grad and self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def _not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def record(out_data, inputs: Sequence, backward: Callable, saved: Sequence = ()) -> Tensor:
    """Wrap ``out_data`` as a tensor and put a node on the tape if needed.

    ``backward(grad_out)`` returns one gradient (or None) per input.
    ``saved`` lists the arrays/tensors the closure retains, for accounting.
    """
    out = Tensor(out_data)
    if grad_enabled() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = current_tape().record(out, inputs, backward, saved)
    return out


def _needs(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        # scalar constant: nothing to keep
        scale = float(b)
        a = as_tensor(a)
        return record(a.data * np.asarray(scale, dtype=a.dtype), (a,), lambda g: (g * scale,))
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_check("mul", a, b)
    sa, sb = a.shape, b.shape
    saved = (b if _needs(a) else None, a if _needs(b) else None)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g * bd, sa) if _needs(a) else None
        gb = unbroadcast(g * ad, sb) if _needs(b) else None
        return ga, gb

    return record(ad * bd, (a, b), bw, saved)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    saved = (b if _needs(a) else None, a if _needs(b) else None)
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), sa) if _needs(a) else None
        gb = None
        if _needs(b):
            if ad.ndim > 2 and len(sb) == 2:
                # fold batch dims into rows: one GEMM instead of a batched one
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), sb)
        return ga, gb

    return record(out, (a, b), bw, saved)


def rowwise_matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for 2-D ``w`` where each output row depends only on its input row.

    BLAS may reorder the inner sum by batch size; einsum's plain loop does
    not, so streaming one row at a time reproduces the batched result bitwise.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("rowwise_matmul", x.shape, w.shape)
    xd, wd = x.data, w.data
    sx = x.shape

    def bw(g):
        gx = np.matmul(g, wd.T) if _needs(x) else None
        gw = xd.reshape(-1, sx[-1]).T @ g.reshape(-1, g.shape[-1]) if _needs(w) else None
        return gx, gw

    saved = (w if _needs(x) else None, x if _needs(w) else None)
    return record(np.einsum("...i,ij->...j", xd, wd), (x, w), bw, saved)


# ---------------------------------------------------------------------------
# unary maps


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,), (out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record(np.log(xd), (x,), lambda g: (g / xd,), (x,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),), (out,))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = expit(xd)

    def bw(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return record(xd * s, (x,), bw, (x,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record(xd * cdf, (x,), bw, (x,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return record(out, (x,), lambda g: (g * expit(xd),), (x,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), (inside,))


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Entries where ``keep`` is False are replaced by ``value``."""
    keep = np.asarray(keep, dtype=bool)
    _broadcast_check("masked_fill", x, keep)
    out = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    sx = x.shape
    return record(out, (x,), lambda g: (unbroadcast(np.where(keep, g, 0.0), sx),), (keep,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    sx = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, sx),)

    return record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; rows that are entirely -inf are not allowed."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return record(out, (x,), bw, (out,))


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit population variance."""
    xd = x.data
    d = xd.shape[-1]
    if weight is not None and weight.shape != (d,):
        raise ShapeError("layer_norm", x.shape, weight.shape)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gw = (g * xhat).sum(axis=lead) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=lead) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data if weight is not None else g
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    inputs = (x, weight, bias)
    return record(out, inputs, bw, (xhat, rstd))


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    sx = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", sx, shape) from None
    return record(out, (x,), lambda g: (g.reshape(sx),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return record(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    sx, dt = x.shape, x.dtype

    fancy = _fancy(index)

    def bw(g):
        full = np.zeros(sx, dtype=dt)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    saved = (index,) if fancy else ()
    return record(x.data[index], (x,), bw, saved)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tensors, bw)


def shift_right(x: Tensor, first: Tensor, axis: int = -2) -> Tensor:
    """Drop the last step along ``axis`` and prepend ``first``."""
    axis = axis % x.ndim
    body = getitem(x, (slice(None),) * axis + (slice(0, -1),))
    return concat([first, body], axis=axis)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the result has shape ``ids.shape + table.shape[1:]``."""
    ids = np.asarray(ids)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = np.argwhere((ids < 0) | (ids >= n))[0]
        raise IndexError(f"id {ids[tuple(bad)]} out of range [0, {n}) at position {tuple(int(i) for i in bad)}")
    st, dt = table.shape, table.dtype

    def bw(g):
        full = np.zeros(st, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape((-1,) + st[1:]))
        return (full,)

    return record(table.data[ids], (table,), bw, (ids,))


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution over time.

    ``x`` is (..., T, C), ``weight`` is (C, k) with ``weight[:, j]`` the tap at
    lag j, so ``out[t] = sum_j weight[:, j] * x[t - j]`` with zeros before t=0.
    """
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[0] != x.shape[-1]:
        raise ShapeError("causal_conv1d", x.shape, weight.shape)
    xd, wd = x.data, weight.data
    T = xd.shape[-2]
    k = wd.shape[1]
    out = xd * wd[:, 0]
    for j in range(1, min(k, T)):
        out[..., j:, :] += xd[..., :-j, :] * wd[:, j]
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = g * wd[:, 0]
            for j in range(1, min(k, T)):
                gx[..., :-j, :] += g[..., j:, :] * wd[:, j]
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            gw[:, 0] = (g * xd).sum(axis=lead)
            for j in range(1, min(k, T)):
                gw[:, j] = (g[..., j:, :] * xd[..., :-j, :]).sum(axis=lead)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gw, gb

    return record(out, (x, weight, bias), bw, (x if weight.requires_grad else None,))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = loss.node.tape
    if tape.consumed:
        raise RuntimeError("the tape holding this loss was already consumed")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not _needs(t):
                continue
            if t.node is None:
                t.grad = np.array(gi, dtype=t.dtype) if t.grad is None else t.grad + gi
            else:
                k = id(t)
                grads[k] = gi if k not in grads else grads[k] + gi
    tape.release()
    tape.consumed = True
    stack = _stack()
    if stack[0] is tape:
        stack[0] = Tape()
