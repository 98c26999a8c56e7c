"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for this package's networks and losses: elementwise
arithmetic with broadcasting, a few nonlinearities, dense and convolutional
layers, reductions, and concatenation.  Graphs are built eagerly; calling
:meth:`Tensor.backward` on a scalar accumulates gradients into every
reachable tensor created with ``requires_grad=True``.

Gradients carry the dtype of the forward data, so float64 inputs give
float64 gradients (used by the finite-difference checks).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "mul",
    "concat",
    "clip",
    "exp",
    "log",
    "sqrt",
    "relu",
    "leaky_relu",
    "elu",
    "sigmoid",
    "matmul",
    "reshape",
    "mean",
    "tsum",
    "conv2d",
    "conv_transpose2d",
]


class Tensor:
    """A numpy array plus the bookkeeping to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad=False, _parents=(), _vjps=()):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjps = _vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __float__(self):
        return float(self.data)

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not (parent.requires_grad or parent._parents):
                    continue
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, Tensor(-np.asarray(other)))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, vjps):
    if _tracked(*parents):
        return Tensor(data, _parents=tuple(parents), _vjps=tuple(vjps))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    # python scalars stay scalars so float32 graphs are not upcast
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data + b, (a,), (lambda g: g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _make(a.data * b, (a,), (lambda g: g * b,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / b)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p
    return _make(out, (a,), (lambda g: g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), (lambda g: g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), (lambda g: g / (2.0 * out),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), (lambda g: g * mask,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), (lambda g: g * mask,))


def leaky_relu(a, alpha: float = 0.1) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype)
    return _make(a.data * scale, (a,), (lambda g: g * scale,))


def elu(a, alpha: float = 1.0) -> Tensor:
    """Exponential linear unit; C1-smooth, so finite differences stay tight."""
    a = as_tensor(a)
    neg = np.minimum(a.data, 0)
    out = np.where(a.data > 0, a.data, alpha * np.expm1(neg))
    slope = np.where(a.data > 0, 1.0, alpha * np.exp(neg)).astype(a.data.dtype)
    return _make(out.astype(a.data.dtype, copy=False), (a,), (lambda g: g * slope,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    return _make(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.data.shape),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def make_vjp(index):
        return lambda g: np.split(g, splits, axis=axis)[index]

    return _make(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, g)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(out, (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# convolution ---------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """(N, C, H, W) -> (N, Ho*Wo, C*kh*kw) patches."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    n, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    patches = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patches[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation on (N, C, H, W) with an (O, C, kh, kw) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    n = x.data.shape[0]
    o, c, kh, kw = w.data.shape
    if x.data.shape[1] != c:
        raise ValueError(f"input has {x.data.shape[1]} channels, kernel expects {c}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    flat = cols.reshape(n * ho * wo, c * kh * kw)
    out = (flat @ wmat.T).reshape(n, ho * wo, o).transpose(0, 2, 1).reshape(n, o, ho, wo)

    parents = [x, w]
    x_shape = x.data.shape

    def vjp_x(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        return _col2im((g2 @ wmat).reshape(n, ho * wo, c * kh * kw), x_shape, kh, kw, stride, pad)

    def vjp_w(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = g2.T @ cols.reshape(n * ho * wo, c * kh * kw)
        return gw.reshape(o, c, kh, kw)

    vjps = [vjp_x, vjp_w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, o, 1, 1)
        parents.append(b)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(out, parents, vjps)


def conv_transpose2d(x, w, b=None, stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed convolution with an (C_in, C_out, kh, kw) kernel.

    Output spatial size is ``(in - 1) * stride - 2 * pad + k``; with the
    default 4x4/stride-2/pad-1 setup this exactly doubles the resolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, ci, h, wd = x.data.shape
    ci_w, co, kh, kw = w.data.shape
    if ci != ci_w:
        raise ValueError(f"input has {ci} channels, kernel expects {ci_w}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    wmat = w.data.reshape(ci, co * kh * kw)
    x_flat = np.ascontiguousarray(x.data.reshape(n, ci, h * wd).transpose(0, 2, 1))
    cols = (x_flat.reshape(n * h * wd, ci) @ wmat).reshape(n, h * wd, co * kh * kw)
    out = _col2im(cols, (n, co, ho, wo), kh, kw, stride, pad)

    parents = [x, w]

    def vjp_x(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)
        gx = gcols.reshape(n * h * wd, co * kh * kw) @ wmat.T
        return gx.reshape(n, h * wd, ci).transpose(0, 2, 1).reshape(n, ci, h, wd)

    def vjp_w(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)
        gw = x_flat.reshape(n * h * wd, ci).T @ gcols.reshape(n * h * wd, co * kh * kw)
        return gw.reshape(ci, co, kh, kw)

    vjps = [vjp_x, vjp_w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, co, 1, 1)
        parents.append(b)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(out, parents, vjps)
