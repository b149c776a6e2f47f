"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Covers exactly the operations the denoising network needs (broadcasting
arithmetic, batched matmul, slicing, softmax, SiLU, reductions, nearest
upsampling) plus SGD/Adam optimizers. Everything is float64 and single
threaded apart from BLAS, so gradients can be validated against central
finite differences and repeated runs are bit-identical.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference path)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array with an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ------------------------------------------------------
    def backward(self):
        """Backpropagate from a scalar tensor through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _leaf_accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad or t._backward is not None:
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad += g


# -- arithmetic ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _leaf_accumulate(a, _unbroadcast(g, a.data.shape))
        _leaf_accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        _leaf_accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _leaf_accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    data = a.data ** p

    def backward(g):
        _leaf_accumulate(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    data = np.sqrt(a.data)

    def backward(g):
        _leaf_accumulate(a, g * 0.5 / np.sqrt(a.data))

    return _node(data, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)

    def backward(g):
        _leaf_accumulate(a, g * data)

    return _node(data, (a,), backward)


def silu(a) -> Tensor:
    a = _wrap(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward(g):
        _leaf_accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _node(data, (a,), backward)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, _swap_last(b.data))
        gb = np.matmul(_swap_last(a.data), g)
        if ga.shape != a.data.shape:
            ga = _unbroadcast(ga, a.data.shape)
        if gb.shape != b.data.shape:
            gb = _unbroadcast(gb, b.data.shape)
        _leaf_accumulate(a, ga)
        _leaf_accumulate(b, gb)

    return _node(data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _leaf_accumulate(a, data * (g - dot))

    return _node(data, (a,), backward)


# -- reductions ------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            grad = np.broadcast_to(g, a.data.shape)
        elif keepdims:
            grad = np.broadcast_to(g, a.data.shape)
        else:
            grad = np.broadcast_to(np.expand_dims(g, axis), a.data.shape)
        _leaf_accumulate(a, np.ascontiguousarray(grad))

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- shape manipulation -----------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g):
        _leaf_accumulate(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        _leaf_accumulate(a, g.transpose(inverse))

    return _node(data, (a,), backward)


def take(a, key) -> Tensor:
    """Basic (non-fancy) slicing with gradient scatter-back."""
    a = _wrap(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        _leaf_accumulate(a, full)

    return _node(data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _leaf_accumulate(t, piece)

    return _node(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _leaf_accumulate(t, np.take(g, i, axis=axis))

    return _node(data, tuple(tensors), backward)


def pad_hw(a, pad: int) -> Tensor:
    """Zero-pad the two middle axes of an (N, H, W, C) tensor."""
    a = _wrap(a)
    width = ((0, 0), (pad, pad), (pad, pad), (0, 0))
    data = np.pad(a.data, width)

    def backward(g):
        _leaf_accumulate(a, g[:, pad:-pad, pad:-pad, :])

    return _node(data, (a,), backward)


def upsample2x(a) -> Tensor:
    """Nearest-neighbor 2x upsampling of an (N, H, W, C) tensor."""
    a = _wrap(a)
    data = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def backward(g):
        n, h2, w2, c = g.shape
        _leaf_accumulate(a, g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4)))

    return _node(data, (a,), backward)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """table[ids] for an integer index array; gradients scatter-add back."""
    table = _wrap(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _leaf_accumulate(table, full)

    return _node(data, (table,), backward)


def conv3x3(x, w, b, stride: int = 1) -> Tensor:
    """3x3 'same' convolution on (N, H, W, Cin) with weights (3, 3, Cin, Cout).

    Fused op: forward and backward run as nine shifted GEMMs against views of
    the zero-padded input, which keeps tape overhead to a single node.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    n, h, wd, cin = x.data.shape
    ho, wo = h // stride, wd // stride
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, ho, wo, w.data.shape[3]), dtype=np.float64)
    views = []
    for dy in range(3):
        for dx in range(3):
            v = xp[:, dy:dy + (ho - 1) * stride + 1:stride,
                   dx:dx + (wo - 1) * stride + 1:stride, :]
            views.append(v)
            out += np.matmul(v, w.data[dy, dx])
    out += b.data

    def backward(g):
        if w.requires_grad or w._backward is not None:
            gw = np.empty_like(w.data)
            for i, v in enumerate(views):
                gw[i // 3, i % 3] = np.tensordot(v, g, axes=([0, 1, 2], [0, 1, 2]))
            _leaf_accumulate(w, gw)
        if b.requires_grad or b._backward is not None:
            _leaf_accumulate(b, g.sum(axis=(0, 1, 2)))
        if x.requires_grad or x._backward is not None:
            gxp = np.zeros_like(xp)
            for i in range(9):
                dy, dx = i // 3, i % 3
                gxp[:, dy:dy + (ho - 1) * stride + 1:stride,
                    dx:dx + (wo - 1) * stride + 1:stride, :] += \
                    np.matmul(g, w.data[dy, dx].T)
            _leaf_accumulate(x, gxp[:, 1:-1, 1:-1, :])

    return _node(out, (x, w, b), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with affine parameters (fused)."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad or gamma._backward is not None:
            axes = tuple(range(g.ndim - 1))
            _leaf_accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad or beta._backward is not None:
            _leaf_accumulate(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad or x._backward is not None:
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            _leaf_accumulate(x, inv * (gh - m1 - xhat * m2))

    return _node(out, (x, gamma, beta), backward)


def outer(a, b) -> Tensor:
    """Outer product of two vectors, (r,) x (c,) -> (r, c)."""
    a, b = _wrap(a), _wrap(b)
    data = np.outer(a.data, b.data)

    def backward(g):
        _leaf_accumulate(a, g @ b.data)
        _leaf_accumulate(b, a.data @ g)

    return _node(data, (a, b), backward)


# -- optimizers -------------------------------------------------------------------


class SGD:
    """Plain stochastic gradient descent with momentum."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.b1 ** self.t
        bias2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
