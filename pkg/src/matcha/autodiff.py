"""Minimal reverse-mode differentiation over numpy arrays.

Float64 throughout. Graphs are built only when an input requires gradients,
so the same forward code doubles as a plain numpy evaluation path when all
leaves are constants. Correctness is pinned by central finite differences
in the training test suite.
"""

import numpy as np

from matcha import kernels


class Var:
    """One node: a value, an optional vjp closure, and parent links."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, vjp) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value)
    out = Var(value, requires_grad=True)
    out._parents = parents
    out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(root: Var):
    """Accumulate gradients of a scalar root into every requires_grad leaf."""
    if root.value.ndim != 0:
        raise ValueError("backward() expects a scalar root")
    if not root.requires_grad:
        return
    # Iterative topological order; recursion would overflow on long tapes.
    topo, visiting = [], [(root, False)]
    seen = set()
    while visiting:
        node, done = visiting.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        visiting.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                visiting.append((p, False))
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    value = a.value + b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(value, (a, b), vjp)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    value = a.value - b.value

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _node(value, (a, b), vjp)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    value = a.value * b.value

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _node(value, (a, b), vjp)


def div(a, b):
    a, b = as_var(a), as_var(b)
    value = a.value / b.value

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value**2), b.value.shape),
        )

    return _node(value, (a, b), vjp)


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    value = a.value @ b.value

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _node(value, (a, b), vjp)


# -- shape ops -----------------------------------------------------------


def reshape(x, shape):
    x = as_var(x)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_var(x)
    inverse = np.argsort(axes)
    return _node(
        np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),)
    )


def swap_last(x):
    return transpose(x, tuple(range(x.value.ndim - 2)) + (x.value.ndim - 1, x.value.ndim - 2))


def concat(parts, axis):
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _node(value, parts, vjp)


def take(x, idx):
    """Basic slicing / integer indexing with gradient scatter-add."""
    x = as_var(x)
    value = x.value[idx]
    shape = x.value.shape

    def vjp(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(buf, idx, g)
        return (buf,)

    return _node(value, (x,), vjp)


def diag2d(x):
    x = as_var(x)
    n = x.value.shape[0]
    idx = (np.arange(n), np.arange(n))
    return take(x, idx)


# -- elementwise ---------------------------------------------------------


def exp(x):
    x = as_var(x)
    value = np.exp(x.value)
    return _node(value, (x,), lambda g: (g * value,))


def log(x):
    x = as_var(x)
    return _node(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    x = as_var(x)
    value = np.sqrt(x.value)
    return _node(value, (x,), lambda g: (g * 0.5 / value,))


def tanh(x):
    x = as_var(x)
    value = np.tanh(x.value)
    return _node(value, (x,), lambda g: (g * (1.0 - value**2),))


def maximum_scalar(x, c):
    x = as_var(x)
    mask = x.value >= c
    return _node(np.maximum(x.value, c), (x,), lambda g: (g * mask,))


def gelu(x):
    """Smooth tanh-form GELU used between the MLP head layers."""
    c = 0.7978845608028654  # sqrt(2/pi)
    x = as_var(x)
    inner = tanh(mul(add(x, mul(mul(mul(x, x), x), 0.044715)), c))
    return mul(mul(x, add(inner, 1.0)), 0.5)


# -- reductions ----------------------------------------------------------


def vsum(x, axis=None, keepdims=False):
    x = as_var(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(value, (x,), vjp)


def vmean(x, axis=None, keepdims=False):
    x = as_var(x)
    if axis is None:
        n = x.value.size
    else:
        n = x.value.shape[axis]
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, axis=-1):
    x = as_var(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - inner),)

    return _node(value, (x,), vjp)


def logsumexp(x, axis=-1):
    x = as_var(x)
    m = x.value.max(axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(s), axis=axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _node(value, (x,), vjp)


# -- structured ops ------------------------------------------------------


def bilinear_gather(fmap, xs, ys):
    """Differentiable bilinear sampling of an (H, W, C) node at fixed points."""
    fmap = as_var(fmap)
    h, w, _ = fmap.value.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    value = kernels.bilinear_gather(fmap.value, xs, ys)

    def vjp(g):
        return (kernels.bilinear_scatter(np.ascontiguousarray(g), xs, ys, h, w),)

    return _node(value, (fmap,), vjp)


def normalize_rows(x, epsilon=1e-12):
    """Row-wise x / max(||x||, eps) as a differentiable composite."""
    norms = sqrt(vsum(mul(x, x), axis=1, keepdims=True))
    return div(x, maximum_scalar(norms, epsilon))
