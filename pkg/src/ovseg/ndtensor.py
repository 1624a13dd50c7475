"""A small float64 tensor with tape-based reverse-mode differentiation.

Only the operations needed by the encoder, the upsampler and the distillation
losses are provided.  Operations are recorded on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient; outside a tape
everything runs as plain numpy.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_TAPES: list["Tape"] = []


@dataclass
class Node:
    inputs: tuple["Tensor", ...]
    out: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._leaf:
                    if inp.grad is None:
                        inp.grad = np.zeros_like(inp.data)
                    inp.grad += gi
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


def backward(loss: "Tensor") -> None:
    """Backpropagate ``loss`` along the tape it was recorded on."""
    tape = getattr(loss, "_tape", None)
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        return
    tape.backward(loss)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._leaf = True
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

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
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by tensor operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    out._tape = None
    out.requires_grad = False
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(Node(inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data**2, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data**2, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out**2),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, which gradient checks need)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def back(g):
        d = 0.5 * (1 + t) + 0.5 * x * (1 - t**2) * _GELU_C * (1 + 3 * 0.044715 * x**2)
        return (g * d,)

    return _result(0.5 * x * (1 + t), (a,), back)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return tsum(a, axes, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def back(g):
        z = np.zeros_like(a.data)
        np.add.at(z, key, g)
        return (z,)

    return _result(a.data[key], (a,), back)


def take(a, idx, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim

    def back(g):
        z = np.zeros_like(a.data)
        np.add.at(np.moveaxis(z, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _result(np.take(a.data, idx, axis=axis), (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    axis = axis % ts[0].ndim
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------- normalisers


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), back)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm over a zero-length last axis")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs {x.shape}")
    centred = x - mean(x, -1, keepdims=True)
    var = mean(square(centred), -1, keepdims=True)
    return centred / sqrt(var + eps) * gain + bias


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices to unit L2 norm; callers check for zero norms first."""
    return x / sqrt(tsum(square(x), axis, keepdims=True))


# ---------------------------------------------------------------- image ops


def reflect_index(n: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding, valid for any ``pad`` (mirrors repeatedly)."""
    i = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    m = np.mod(i, period)
    return np.where(m < n, m, period - m)


def pad2d(x, pad: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``pad`` on every side."""
    x = as_tensor(x)
    if pad == 0:
        return x
    if mode == "reflect":
        h, w = x.shape[-2:]
        return take(take(x, reflect_index(h, pad), -2), reflect_index(w, pad), -1)
    if mode != "zero":
        raise ValueError(f"unknown padding mode {mode!r}")
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return _result(np.pad(x.data, widths), (x,),
                   lambda g: (g[..., pad:-pad, pad:-pad],))


def im2col(x, kh: int, kw: int, stride: int = 1) -> Tensor:
    """[C, H, W] -> [C, kh*kw, Ho*Wo] of strided patches (no padding)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError("im2col expects [C, H, W]")
    c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c, kh * kw, ho * wo)

    def back(g):
        gx = np.zeros_like(x.data)
        g = g.reshape(c, kh, kw, ho, wo)
        for dy in range(kh):
            for dx in range(kw):
                gx[:, dy:dy + stride * (ho - 1) + 1:stride,
                   dx:dx + stride * (wo - 1) + 1:stride] += g[:, dy, dx]
        return (gx,)

    return _result(cols, (x,), back)


def conv2d(x, weight, bias=None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of [C_in, H, W] with [C_out, C_in, kh, kw] (zero padding)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shapes incompatible: {x.shape} * {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    xp = pad2d(x, padding)
    hp, wp = xp.shape[-2:]
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    cols = reshape(im2col(xp, kh, kw, stride), (c_in * kh * kw, ho * wo))
    out = reshape(weight, (c_out, c_in * kh * kw)) @ cols
    if bias is not None:
        out = out + reshape(as_tensor(bias), (c_out, 1))
    return reshape(out, (c_out, ho, wo))


def _window_offsets(radius: int):
    side = 2 * radius + 1
    return [(dy, dx) for dy in range(side) for dx in range(side)]


def window_dot(padded, centre, radius: int) -> Tensor:
    """Dot product of each pixel's vector with every neighbour in a square window.

    ``padded`` is [D, H+2r, W+2r], ``centre`` is [D, H, W]; the result is
    [(2r+1)^2, H, W] with offsets in row-major order.
    """
    padded, centre = as_tensor(padded), as_tensor(centre)
    d, h, w = centre.shape
    if padded.shape != (d, h + 2 * radius, w + 2 * radius):
        raise DimensionError(f"window_dot shapes {padded.shape} vs {centre.shape}")
    offsets = _window_offsets(radius)
    out = np.empty((len(offsets), h, w))
    for o, (dy, dx) in enumerate(offsets):
        out[o] = np.einsum("dhw,dhw->hw", centre.data, padded.data[:, dy:dy + h, dx:dx + w])

    def back(g):
        gp = np.zeros_like(padded.data)
        gc = np.zeros_like(centre.data)
        for o, (dy, dx) in enumerate(offsets):
            gc += padded.data[:, dy:dy + h, dx:dx + w] * g[o]
            gp[:, dy:dy + h, dx:dx + w] += centre.data * g[o]
        return gp, gc

    return _result(out, (padded, centre), back)


def window_sum(padded, weights, radius: int) -> Tensor:
    """Per-pixel weighted sum over a square window.

    ``padded`` is [C, H+2r, W+2r], ``weights`` is [(2r+1)^2, H, W]; returns [C, H, W].
    """
    padded, weights = as_tensor(padded), as_tensor(weights)
    n_off, h, w = weights.shape
    offsets = _window_offsets(radius)
    if n_off != len(offsets) or padded.shape[1:] != (h + 2 * radius, w + 2 * radius):
        raise DimensionError(f"window_sum shapes {padded.shape} vs {weights.shape}")
    out = np.zeros((padded.shape[0], h, w))
    for o, (dy, dx) in enumerate(offsets):
        out += weights.data[o] * padded.data[:, dy:dy + h, dx:dx + w]

    def back(g):
        gp = np.zeros_like(padded.data)
        gw = np.empty_like(weights.data)
        for o, (dy, dx) in enumerate(offsets):
            gp[:, dy:dy + h, dx:dx + w] += weights.data[o] * g
            gw[o] = np.einsum("chw,chw->hw", g, padded.data[:, dy:dy + h, dx:dx + w])
        return gp, gw

    return _result(out, (padded, weights), back)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation matrix [n_out, n_in], half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align_corners=False, no antialiasing)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    rows = Tensor(interp_matrix(h, out_h))
    cols = Tensor(interp_matrix(w, out_w).T)
    return (rows @ x) @ cols
