"""A small reverse-mode differentiation tape over numpy arrays.

Each :class:`Tensor` remembers its parents and a vector-Jacobian rule.
:func:`backward` walks the graph in reverse topological order and accumulates
gradients into every tensor that requires them.  Broadcasting follows numpy;
gradients are summed back to the parent's shape.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None, name: str | None = None):
        data = np.asarray(data)
        # float32 survives for reduced-precision inference; everything else is float64
        self.data = data if data.dtype == np.float32 else data.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp)
    return Tensor(data)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = unbroadcast(pg, p.data.shape)
            grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    def vjp(g):
        return (g * b.data if a.requires_grad else None), (g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def gelu(a):
    """tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def vjp(g):
        dinner = c * (1 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t**2) * dinner),)

    return _make(out, (a,), vjp)


def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    return _make(softplus_np(a.data), (a,), lambda g: (g * sigmoid_np(a.data),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out**2),))


# ---------------------------------------------------------------------------
# reductions and shapes
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=True)
    hit = a.data == out
    hit = hit / hit.sum(axis=axis, keepdims=True)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * hit,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def take_rows(a, index):
    """``a[index]`` for an integer index array over the first axis."""
    a = as_tensor(a)
    index = np.asarray(index)
    n = a.data.shape[0]

    def vjp(g):
        # scatter-add as a sparse product; much faster than np.add.at
        S = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
        return (np.asarray(S @ g.reshape(len(index), -1)).reshape(a.data.shape),)

    return _make(a.data[index], (a,), vjp)


def segment_mean(a, ids, n_segments):
    """Mean of rows of ``a`` grouped by ``ids`` (empty segments give 0)."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    counts = np.maximum(np.bincount(ids, minlength=n_segments), 1).astype(np.float64)
    flat = a.data.reshape(len(ids), -1)
    out = np.empty((n_segments, flat.shape[1]))
    for col in range(flat.shape[1]):
        out[:, col] = np.bincount(ids, weights=flat[:, col], minlength=n_segments)
    out /= counts[:, None]

    def vjp(g):
        g = g.reshape(n_segments, -1) / counts[:, None]
        return (g[ids].reshape(a.data.shape),)

    return _make(out.reshape((n_segments,) + a.data.shape[1:]), (a,), vjp)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def const_matmul(A, x):
    """``A @ x`` for a constant (dense or scipy sparse) matrix ``A``."""
    x = as_tensor(x)
    AT = A.T
    return _make(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(AT @ g),))


# ---------------------------------------------------------------------------
# fused neural-network pieces
# ---------------------------------------------------------------------------


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def masked_fill(a, mask: np.ndarray, value: float):
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = as_tensor(a)
    keep = ~np.broadcast_to(mask, a.data.shape)
    return _make(np.where(keep, a.data, value), (a,), lambda g: (g * keep,))


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalization over the last axis with affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx_hat = g * gamma.data
        d = x.data.shape[-1]
        gx = inv / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), vjp)


def l2_normalize(x, axis=-1, eps: float = 1e-12):
    """``x / max(||x||, eps)``; rows with tiny norm are scaled, not divided by zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe
    small = norm < eps

    def vjp(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        full = (g - out * proj) / safe
        return (np.where(small, g / safe, full),)

    return _make(out, (x,), vjp)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numeric_grad(f, x: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` wrt array ``x`` (modified in place).

    ``index`` restricts the check to a list of flat positions.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if index is None else index
    g = np.zeros(flat.size)
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def rel_error(a, b, floor: float = 1e-12) -> float:
    """Max absolute deviation relative to the largest gradient magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
