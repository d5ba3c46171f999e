"""Numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable op creates a new :class:`Tensor` holding its parents and a
closure mapping the output gradient to per-parent gradients.  ``backward``
walks the graph in reverse topological order and accumulates into ``.grad`` of
leaf tensors that were created with ``requires_grad=True``.

Data is float32 unless a float64 array is passed in explicitly; the gradient
checks run the whole graph in float64.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import special

_grad_enabled = True
_ids = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 and isinstance(value, np.ndarray):
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """N-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self, params: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, params)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    t = Tensor(_as_array(data, dtype), requires_grad=requires_grad)
    return t


def _wrap(value, like: Optional[np.ndarray] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(_as_array(value, dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.id = next(_ids)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


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


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    _broadcast_check(a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.data)
    _broadcast_check(a.data, b.data)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    e = float(exponent)
    out = a.data**e

    def bw(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),))


def normal_cdf(a) -> Tensor:
    """Standard normal cumulative distribution function."""
    a = _wrap(a)
    out = special.ndtr(a.data)
    coef = a.dtype.type(1.0 / np.sqrt(2.0 * np.pi))

    def bw(g):
        return (g * coef * np.exp(-0.5 * a.data * a.data),)

    return _make(out, (a,), bw)


def lower_bound(a, bound: float) -> Tensor:
    """``max(a, bound)`` that still lets gradients push values up from below."""
    a = _wrap(a)
    below = a.data < bound
    out = np.where(below, a.dtype.type(bound), a.data)

    def bw(g):
        return (np.where(below & (g > 0), 0.0, g).astype(g.dtype, copy=False),)

    return _make(out, (a,), bw)


def clamp_min(a, bound: float) -> Tensor:
    """Plain ``max(a, bound)``; zero gradient where clamped."""
    a = _wrap(a)
    keep = a.data >= bound
    out = np.where(keep, a.data, a.dtype.type(bound))
    return _make(out, (a,), lambda g: (g * keep,))


def round_ste(a) -> Tensor:
    """Round half to even with an identity (straight-through) gradient."""
    a = _wrap(a)
    return _make(np.round(a.data), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)
    out = np.asarray(out)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = _wrap(a)

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (
        index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum; no index may repeat within a single operand."""
    a = _wrap(a)
    b = _wrap(b, a.data)
    ins, out_sub = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    out = np.einsum(spec, a.data, b.data, optimize=True)

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, a.data, optimize=True)
        return ga, gb

    return _make(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a = _wrap(a)
    b = _wrap(b, a.data)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# Convolutions and resampling
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp, (n, c, ho, wo, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False
    )


def _scatter_windows(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Inverse of ``_windows``: add cols[n, h, w, c, i, j] into out[n, c, h*s+i, w*s+j]."""
    _, ho, wo, _, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N,C,H,W] with weight [O,C,kh,kw]."""
    x = _wrap(x)
    weight = _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"conv2d: input {h}x{w} (padding {padding}) smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        grads = [None, gw]
        if x.requires_grad:
            gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # [N,Ho,Wo,C,kh,kw]
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            _scatter_windows(gcols, gxp, stride)
            grads[0] = gxp[:, :, padding : padding + h, padding : padding + w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw)


def conv_transpose2d(
    x, weight, bias=None, stride: int = 2, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Transposed convolution of x [N,Cin,H,W] with weight [Cin,Cout,k,k]."""
    x = _wrap(x)
    weight = _wrap(weight)
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels but weight expects {ci}")
    hf = (h - 1) * stride + kh + output_padding
    wf = (w - 1) * stride + kw + output_padding
    ho = hf - 2 * padding
    wo = wf - 2 * padding
    cols = np.tensordot(x.data, weight.data, axes=([1], [0]))  # [N,H,W,Cout,kh,kw]
    full = np.zeros((n, o, hf, wf), dtype=cols.dtype)
    _scatter_windows(cols, full, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = _windows(gfull, kh, kw, stride, h, w)  # [N,Cout,H,W,kh,kw]
        gw = None
        if weight.requires_grad:
            gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        grads = [None, gw]
        if x.requires_grad:
            grads[0] = np.ascontiguousarray(
                np.tensordot(gcols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            )
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw)


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # output j samples source (j + 0.5) / 2 - 0.5 with edge clamping
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _upsample_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even, odd = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (even + odd)
    out[..., :-1] += 0.25 * even[..., 1:]
    out[..., 0] += 0.25 * even[..., 0]
    out[..., 1:] += 0.25 * odd[..., :-1]
    out[..., -1] += 0.25 * odd[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_upsample2x(x) -> Tensor:
    """Bilinear x2 upsampling, half-pixel centres, clamped edges."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample2x expects [N,C,H,W], got {x.shape}")
    out = np.ascontiguousarray(_upsample_axis(_upsample_axis(x.data, 2), 3))

    def bw(g):
        return (np.ascontiguousarray(_upsample_axis_adjoint(_upsample_axis_adjoint(g, 3), 2)),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    Tensors in ``params`` that the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
