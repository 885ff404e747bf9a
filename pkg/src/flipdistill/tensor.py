"""Dense float64 tensors with a reverse-mode gradient tape.

The graph is recorded eagerly: every op returns a new Tensor holding
references to its parents and a closure that propagates the incoming
gradient to them. ``backward()`` on a scalar walks the graph in reverse
topological order and *accumulates* into ``.grad``; the trainer is
responsible for zeroing grads between steps. Calling ``backward()``
twice therefore doubles the accumulated gradients (documented contract,
see tests).
"""

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (e.g. log of <= 0)."""


class ContractError(ValueError):
    """An op precondition unrelated to shapes was violated."""


ARCCOS_CLAMP_EPS = 1e-7  # arccos gradient diverges at +-1; cosine of equal vectors is exactly 1


def _as_array(data):
    a = np.asarray(data, dtype=np.float64)
    return a


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ContractError("backward requires a finite loss")

        topo = []
        seen = set()
        stack = [(self, False)]
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

        # reset intermediate grads so repeated backward calls accumulate
        # cleanly into the leaves (the documented contract)
        for node in topo:
            if node._parents:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, out_data, da, db):
    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(da(g), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(db(g), b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=bwd)


def _unary(a, out_data, da):
    def bwd(g):
        if a.requires_grad:
            a._accumulate(da(g))

    return Tensor(out_data, _parents=(a,), _backward=bwd)


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    return _binary(
        a, b, a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def exp(a):
    out = np.exp(a.data)
    return _unary(a, out, lambda g: g * out)


def log(a, eps=0.0):
    x = a.data + eps
    if np.any(x <= 0.0):
        raise DomainError("log requires strictly positive input (after epsilon shift)")
    return _unary(a, np.log(x), lambda g: g / x)


def sqrt(a):
    out = np.sqrt(a.data)
    return _unary(a, out, lambda g: g * 0.5 / out)


def cos(a):
    return _unary(a, np.cos(a.data), lambda g: -g * np.sin(a.data))


def clamp(a, lo, hi):
    mask = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: g * mask)


def arccos(a, clamp_eps=ARCCOS_CLAMP_EPS):
    """arccos with the input clamped to [-1+eps, 1-eps] before evaluation."""
    c = clamp(a, -1.0 + clamp_eps, 1.0 - clamp_eps)
    out = np.arccos(c.data)
    return _unary(c, out, lambda g: -g / np.sqrt(1.0 - c.data * c.data))


def relu(a):
    mask = a.data > 0.0
    return _unary(a, a.data * mask, lambda g: g * mask)


# -- linear algebra ------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    return _binary(
        a, b, a.data @ b.data,
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    )


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")
    return _unary(a, a.data.T.copy(), lambda g: g.T)


def reshape(a, shape):
    old = a.data.shape
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(old))


# -- reductions ----------------------------------------------------------

def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g)
        ge = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(ge, a.data.shape).copy()

    return _unary(a, out, da)


def reduce_mean(a, axis=None, keepdims=False):
    if axis is not None and (axis >= a.data.ndim or axis < -a.data.ndim):
        raise DimensionError(f"mean axis {axis} out of range for shape {a.data.shape}")
    n = a.data.size if axis is None else a.data.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) / float(n)


# -- structure -----------------------------------------------------------

def take(a, key):
    """Basic/integer indexing with scatter-add backward."""
    out = a.data[key]

    def da(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return full

    return _unary(a, out.copy() if isinstance(out, np.ndarray) else out, da)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(out, _parents=tuple(tensors), _backward=bwd)


def stack(tensors):
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[i])

    return Tensor(out, _parents=tuple(tensors), _backward=bwd)


# -- softmax -------------------------------------------------------------

def softmax(a, axis=-1):
    if a.data.ndim == 0:
        raise DimensionError("softmax requires at least 1-D input")
    moved = np.moveaxis(a.data, axis, -1)
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    y_flat = kernels.softmax_rows(flat)
    out = np.moveaxis(y_flat.reshape(moved.shape), -1, axis)

    def da(g):
        g_moved = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, moved.shape[-1]))
        gx = kernels.softmax_rows_backward(y_flat, g_moved)
        return np.moveaxis(gx.reshape(moved.shape), -1, axis)

    return _unary(a, out, da)
