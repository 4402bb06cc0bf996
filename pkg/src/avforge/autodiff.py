"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough tape-based autodiff to express the encoder, the prediction
heads, and the training losses. Every op stores a closure computing
vector-Jacobian products for its parents; ``Tensor.backward`` walks the
tape in reverse topological order. Arrays keep whatever dtype they are
given, so the same graph code runs in float32 for training and float64
for finite-difference gradient checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "broadcast_to",
    "concat",
    "conv1d_same",
    "layer_norm",
    "log",
    "exp",
    "sqrt",
    "relu",
    "sigmoid",
    "softmax",
    "softplus",
    "stack",
    "maximum",
    "minimum",
    "clip",
    "where",
    "absolute",
]

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (forward-only eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # make ndarray <op> Tensor defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction ------------------------------------------------

    @staticmethod
    def _wrap(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- backward pass -------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable parent.

        Intermediate nodes release their tape closures as they are
        consumed, so activations are freed during the sweep.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            node._vjp = None
            node._parents = ()
            if node is not self:
                node.grad = None

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = Tensor._wrap(other, self)
        data = self.data + other.data
        sa, sb = self.data.shape, other.data.shape
        na, nb = self.requires_grad, other.requires_grad
        return Tensor._make(
            data, (self, other),
            lambda g: (
                _unbroadcast(g, sa) if na else None,
                _unbroadcast(g, sb) if nb else None,
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._wrap(other, self)
        data = self.data - other.data
        sa, sb = self.data.shape, other.data.shape
        na, nb = self.requires_grad, other.requires_grad
        return Tensor._make(
            data, (self, other),
            lambda g: (
                _unbroadcast(g, sa) if na else None,
                _unbroadcast(-g, sb) if nb else None,
            ),
        )

    def __rsub__(self, other):
        return Tensor._wrap(other, self) - self

    def __mul__(self, other):
        other = Tensor._wrap(other, self)
        data = self.data * other.data
        a, b = self.data, other.data
        na, nb = self.requires_grad, other.requires_grad
        return Tensor._make(
            data, (self, other),
            lambda g: (
                _unbroadcast(g * b, a.shape) if na else None,
                _unbroadcast(g * a, b.shape) if nb else None,
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other, self)
        data = self.data / other.data
        a, b = self.data, other.data
        na, nb = self.requires_grad, other.requires_grad
        return Tensor._make(
            data, (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape) if na else None,
                _unbroadcast(-g * a / (b * b), b.shape) if nb else None,
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._wrap(other, self) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        c = exponent
        x = self.data
        data = x**c
        return Tensor._make(data, (self,), lambda g: (g * c * x ** (c - 1),))

    def __matmul__(self, other):
        other = Tensor._wrap(other, self)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        data = np.matmul(a, b)
        na, nb = self.requires_grad, other.requires_grad

        def vjp(g):
            ga = _unbroadcast(np.matmul(g, b.swapaxes(-1, -2)), a.shape) if na else None
            gb = _unbroadcast(np.matmul(a.swapaxes(-1, -2), g), b.shape) if nb else None
            return ga, gb

        return Tensor._make(data, (self, other), vjp)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(data, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shaping ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        data = self.data.reshape(shape)
        return Tensor._make(data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        data = self.data.transpose(axes)
        return Tensor._make(data, (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        data = self.data.swapaxes(a, b)
        return Tensor._make(data, (self,), lambda g: (g.swapaxes(a, b),))

    def __getitem__(self, idx):
        data = self.data[idx]
        shape = self.data.shape
        dtype = self.data.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return Tensor._make(data, (self,), vjp)


# -- functional ops -------------------------------------------------------


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.data.shape
    data = np.broadcast_to(x.data, shape)
    return Tensor._make(data.copy(), (x,), lambda g: (_unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(data, tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return Tensor._make(data, tuple(tensors), vjp)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return Tensor._make(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)
    return Tensor._make(data, (x,), lambda g: (g * 0.5 / data,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, 0)
    return Tensor._make(data, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(-np.abs(xd))
    data = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._make(data, (x,), lambda g: (g * data * (1.0 - data),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    data = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    z = np.exp(-np.abs(xd))
    sig = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return Tensor._make(data, (x,), lambda g: (g * sig,))


def softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``bias`` is a constant additive mask."""
    scores = x.data if bias is None else x.data + bias
    p = scores - scores.max(axis=axis, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=axis, keepdims=True)

    def vjp(g):
        gp = g * p
        gp -= p * gp.sum(axis=axis, keepdims=True)
        return (gp,)

    return Tensor._make(p, (x,), vjp)


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select with a constant boolean condition."""
    cond = np.asarray(cond, dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one branch must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor._wrap(a, b)
    b = Tensor._wrap(b, a)
    data = np.where(cond, a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return (
            _unbroadcast(np.where(cond, g, 0), sa),
            _unbroadcast(np.where(cond, 0, g), sb),
        )

    return Tensor._make(data, (a, b), vjp)


def maximum(a: Tensor, b) -> Tensor:
    b = Tensor._wrap(b, a)
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return (
            _unbroadcast(np.where(take_a, g, 0), sa),
            _unbroadcast(np.where(take_a, 0, g), sb),
        )

    return Tensor._make(data, (a, b), vjp)


def minimum(a: Tensor, b) -> Tensor:
    b = Tensor._wrap(b, a)
    take_a = a.data <= b.data
    data = np.where(take_a, a.data, b.data)
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return (
            _unbroadcast(np.where(take_a, g, 0), sa),
            _unbroadcast(np.where(take_a, 0, g), sb),
        )

    return Tensor._make(data, (a, b), vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    data = np.clip(x.data, lo, hi)
    return Tensor._make(data, (x,), lambda g: (g * inside,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * sign,))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine parameters."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * weight.data + bias.data
    reduce_axes = tuple(range(xd.ndim - 1))

    def vjp(g):
        gxhat = g * weight.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        gw = (g * xhat).sum(axis=reduce_axes)
        gb = g.sum(axis=reduce_axes)
        return gx, gw, gb

    return Tensor._make(data, (x, weight, bias), vjp)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Temporal convolution with stride 1 and zero 'same' padding.

    ``x`` has shape (..., T, C_in); ``weight`` has shape (k, C_in, C_out) with
    odd k. Implemented as one flat GEMM against the k kernel taps followed by
    shifted adds, which is much faster here than an im2col copy.
    """
    k, c_in, c_out = weight.data.shape
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    half = k // 2
    xd = x.data
    lead = xd.shape[:-2]
    t = xd.shape[-2]
    xb = xd.reshape(-1, t, c_in)
    nb = xb.shape[0]
    dtype = xd.dtype

    xpad = np.zeros((nb, t + 2 * half, c_in), dtype=dtype)
    xpad[:, half : half + t] = xb
    wcat = weight.data.transpose(1, 0, 2).reshape(c_in, k * c_out)
    z = xpad.reshape(-1, c_in) @ wcat
    z = z.reshape(nb, t + 2 * half, k, c_out)
    y = z[:, 0:t, 0]
    for i in range(1, k):
        y = y + z[:, i : i + t, i]
    if bias is not None:
        y = y + bias.data
    out_shape = lead + (t, c_out)

    def vjp(g):
        gb2 = g.reshape(nb, t, c_out)
        gz = np.zeros((nb, t + 2 * half, k, c_out), dtype=dtype)
        for i in range(k):
            gz[:, i : i + t, i] = gb2
        gzf = gz.reshape(-1, k * c_out)
        gxpad = gzf @ wcat.T
        gx = gxpad.reshape(nb, t + 2 * half, c_in)[:, half : half + t]
        gwcat = xpad.reshape(-1, c_in).T @ gzf
        gw = gwcat.reshape(c_in, k, c_out).transpose(1, 0, 2)
        grads = [gx.reshape(xd.shape), gw]
        if bias is not None:
            grads.append(gb2.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(y.reshape(out_shape), parents, vjp)
