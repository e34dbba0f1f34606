"""Dense array math with reverse-mode differentiation.

Values are numpy arrays wrapped in :class:`Tensor`. Each op records a closure
that maps the output gradient to its inputs; :meth:`Tensor.backward` replays
them in reverse topological order. Broadcasting follows numpy rules and the
gradient of a broadcast operand is summed back to its shape.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeMismatch(ValueError):
    pass


class IndexOutOfVocab(IndexError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool):
    """When on, every op checks its output for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name
        if _DEBUG and not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"non-finite value produced ({name or 'tensor'})")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp

    # operator sugar
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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor that collects gradients."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data), requires_grad=True, name=name)


def tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _as(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _as(a, b if isinstance(b, Tensor) else None), _as(b, a if isinstance(a, Tensor) else None)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _make(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as(a, b if isinstance(b, Tensor) else None), _as(b, a if isinstance(a, Tensor) else None)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _make(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as(a, b if isinstance(b, Tensor) else None), _as(b, a if isinstance(a, Tensor) else None)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _make(out, (a, b), lambda g: (unbroadcast(g * b.data, a.shape),
                                         unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as(a, b if isinstance(b, Tensor) else None), _as(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (unbroadcast(g / b.data, a.shape),
                                         unbroadcast(-g * out / b.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float keeps float32 inputs float32


def gelu(a):
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# shape and reductions

def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def concat(tensors, axis=0):
    tensors = [_as(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def mean_pool(x, axis=0, mask=None):
    """Mean over ``axis``; with a 0/1 ``mask`` only kept rows count (empty -> zeros)."""
    if mask is None:
        return mean(x, axis=axis)
    m = np.asarray(mask, dtype=x.dtype)
    mexp = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    denom = np.maximum(mexp.sum(axis=axis, keepdims=True), 1.0)
    return sum_(mul(x, Tensor(mexp / denom)), axis=axis)


def select(x, index, axis=-1):
    """Pick entries ``index`` (1-D int list) along ``axis``."""
    idx = np.asarray(index, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        ax = axis % x.ndim
        sl = [slice(None)] * x.ndim
        sl[ax] = idx
        np.add.at(gx, tuple(sl), g)
        return (gx,)

    return _make(out, (x,), back)


def gather_rows(x, idx):
    """x[idx] for a row table x of shape (N, ...) and integer array idx of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for table with {x.shape[0]} rows")
    out = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (gx,)

    return _make(out, (x,), back)


def scatter_rows(src, idx, n_rows):
    """Place row i of src at output row idx[i] of an (n_rows, ...) zero array."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, idx, src.data)
    return _make(out, (src,), lambda g: (g[idx],))


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexOutOfVocab(f"token id {int(bad)} outside vocabulary of size {table.shape[0]}")
    return gather_rows(table, ids)


# ---------------------------------------------------------------------------
# linear algebra and normalisation

def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(g, a.data, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return unbroadcast(ga, a.shape), gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.ndim == 1:
            gb = np.multiply.outer(a.data, g)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) zeroes excluded entries."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x, axis=-1):
    z = x.data
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = z.shape[-1]

    def back(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dg = (g * xhat).reshape(-1, n).sum(axis=0)
        db = g.reshape(-1, n).sum(axis=0)
        return dx, dg, db

    return _make(out, (x, gamma, beta), back)


def cross_entropy(logits, target):
    """-log softmax(logits)[target]; per row for 2-D logits, scalar for 1-D."""
    single = logits.ndim == 1
    z = logits.data.reshape(1, -1) if single else logits.data
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    C = z.shape[-1]
    if tgt.shape[0] != z.shape[0]:
        raise ShapeMismatch(f"{tgt.shape[0]} targets for {z.shape[0]} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= C):
        raise IndexOutOfVocab(f"target outside {C} classes")
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    rows = np.arange(z.shape[0])
    losses = (np.log(s) + m)[:, 0] - z[rows, tgt]
    p = e / s

    def back(g):
        g = np.atleast_1d(g).reshape(-1, 1)
        d = p.copy()
        d[rows, tgt] -= 1.0
        d = d * g
        return (d.reshape(logits.shape),)

    out = losses[0] if single else losses
    return _make(np.asarray(out, dtype=z.dtype), (logits,), back)


def l2_normalize(x, axis=-1, eps=0.0):
    norm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True) + eps)
    return div(x, norm)


def cosine_similarity(a, b, axis=-1):
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


__all__ = [
    "Tensor", "Parameter", "ShapeMismatch", "IndexOutOfVocab", "NonFiniteValue",
    "no_grad", "set_debug", "tensor", "add", "sub", "mul", "div", "scale", "exp", "log",
    "sqrt", "tanh", "gelu", "reshape", "transpose", "sum_", "mean", "concat", "mean_pool",
    "select", "gather_rows", "scatter_rows", "embedding_lookup", "matmul", "softmax",
    "log_softmax", "layer_norm", "cross_entropy", "l2_normalize", "cosine_similarity",
]
