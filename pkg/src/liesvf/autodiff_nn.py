"""Array-level reverse-mode differentiation and a tanh multilayer perceptron.

:class:`Var` wraps a numpy array and records how it was computed.  Every op
in this module accepts either plain arrays or ``Var`` objects; with plain
arrays it is just the numpy function, so model code written against these
ops runs untaped at full numpy speed and taped when parameters are ``Var``.

>>> theta = Var(np.array([1.0, 2.0]))
>>> loss = (theta * theta).sum()
>>> grad(loss, [theta])[0]
array([2., 4.])
"""

from __future__ import annotations

import numpy as np

from .errors import GraphNotScalar, ShapeMismatch


class Var:
    """A node of the computation graph.

    ``parents`` and ``vjps`` are parallel tuples: ``vjps[i](g)`` maps the
    output cotangent ``g`` to the cotangent contribution for ``parents[i]``.
    Nodes are immutable once built.
    """

    __array_ufunc__ = None  # make ndarray <op> Var defer to Var.__r<op>__
    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjps = vjps

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def is_var(x):
    return isinstance(x, Var)


def _node(out, *pairs):
    """Wrap ``out`` as a Var over the taped inputs among ``(input, vjp)`` pairs."""
    live = [(p, f) for p, f in pairs if isinstance(p, Var)]
    if not live:
        return out
    return Var(out, tuple(p for p, _ in live), tuple(f for _, f in live))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    va, vb = value(a), value(b)
    return _node(va + vb,
                 (a, lambda g: _unbroadcast(g, va.shape)),
                 (b, lambda g: _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value(a), value(b)
    return _node(va - vb,
                 (a, lambda g: _unbroadcast(g, va.shape)),
                 (b, lambda g: _unbroadcast(-g, vb.shape)))


def mul(a, b):
    va, vb = value(a), value(b)
    return _node(va * vb,
                 (a, lambda g: _unbroadcast(g * vb, va.shape)),
                 (b, lambda g: _unbroadcast(g * va, vb.shape)))


def div(a, b):
    va, vb = value(a), value(b)
    return _node(va / vb,
                 (a, lambda g: _unbroadcast(g / vb, va.shape)),
                 (b, lambda g: _unbroadcast(-g * va / vb**2, vb.shape)))


def neg(a):
    return _node(-value(a), (a, lambda g: -g))


def power(a, p):
    if is_var(p):
        raise TypeError("exponent must be a constant")
    va = value(a)
    return _node(va**p, (a, lambda g: g * p * va ** (p - 1)))


def tanh(a):
    out = np.tanh(value(a))
    return _node(out, (a, lambda g: g * (1.0 - out**2)))


def sin(a):
    va = value(a)
    return _node(np.sin(va), (a, lambda g: g * np.cos(va)))


def cos(a):
    va = value(a)
    return _node(np.cos(va), (a, lambda g: -g * np.sin(va)))


def exp(a):
    out = np.exp(value(a))
    return _node(out, (a, lambda g: g * out))


def sqrt(a):
    out = np.sqrt(value(a))
    return _node(out, (a, lambda g: g / (2.0 * out)))


def abs_(a):
    va = value(a)
    return _node(np.abs(va), (a, lambda g: g * np.sign(va)))


def clip(a, lo, hi):
    """Clamp; the derivative is zero where the bound is active."""
    va = value(a)
    inside = (va > lo) & (va < hi)
    return _node(np.clip(va, lo, hi), (a, lambda g: g * inside))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    va, vb = value(a), value(b)
    return _node(np.where(cond, va, vb),
                 (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), va.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), vb.shape)))


def norm(a):
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    va = value(a)
    r = np.sqrt(np.sum(va * va, axis=-1))
    safe = np.where(r > 0, r, 1.0)

    def vjp(g):
        return (g / safe * (r > 0))[..., None] * va

    return _node(r, (a, vjp))


def unit(a):
    """``a / |a|`` over the last axis, zero at the origin."""
    va = value(a)
    r = np.sqrt(np.sum(va * va, axis=-1, keepdims=True))
    safe = np.where(r > 0, r, 1.0)
    u = va / safe

    def vjp(g):
        proj = g - np.sum(u * g, axis=-1, keepdims=True) * u
        return proj / safe * (r > 0)

    return _node(u, (a, vjp))


# ---------------------------------------------------------------------------
# shape and reductions


def sum_(a, axis=None, keepdims=False):
    va = value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, va.shape).copy()

    return _node(np.sum(va, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None):
    va = value(a)
    n = va.size if axis is None else va.shape[axis]
    return sum_(a, axis) / n


def reshape(a, shape):
    va = value(a)
    return _node(va.reshape(shape), (a, lambda g: g.reshape(va.shape)))


def swapaxes(a, i, j):
    return _node(np.swapaxes(value(a), i, j), (a, lambda g: np.swapaxes(g, i, j)))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return not any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, idx):
    va = value(a)
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros_like(va)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return out

    return _node(va[idx], (a, vjp))


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    pairs = [(x, (lambda i: lambda g: np.take(g, i, axis=axis))(i)) for i, x in enumerate(xs)]
    return _node(out, *pairs)


def concatenate(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for i, x in enumerate(xs):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        pairs.append((x, (lambda s: lambda g: g[s])(tuple(sl))))
    return _node(out, *pairs)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Batched matrix product; both operands need at least two dimensions."""
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if va.shape[-1] != vb.shape[-2]:
        raise ShapeMismatch(f"matmul shapes {va.shape} and {vb.shape} do not align")
    return _node(va @ vb,
                 (a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)),
                 (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)))


def solve(A, b):
    """Batched ``A^-1 b`` for vectors ``b`` of shape (..., n).

    The reverse pass solves with ``A^T`` instead of differentiating an
    explicit inverse.
    """
    vA, vb = value(A), value(b)
    x = np.linalg.solve(vA, vb[..., None])[..., 0]
    cache = {}

    def adj(g):
        key = id(g)
        if key not in cache:
            cache.clear()
            cache[key] = np.linalg.solve(np.swapaxes(vA, -1, -2), g[..., None])[..., 0]
        return cache[key]

    return _node(x,
                 (A, lambda g: _unbroadcast(-adj(g)[..., :, None] * x[..., None, :], vA.shape)),
                 (b, lambda g: _unbroadcast(adj(g), vb.shape)))


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(y, wrt, seed=None):
    """Cotangents of ``y`` with respect to each Var in ``wrt``.

    ``y`` must be scalar unless ``seed`` (same shape as ``y``) is given.
    Inputs that ``y`` does not depend on get zero gradients.
    """
    if not is_var(y):
        return [np.zeros_like(value(w)) for w in wrt]
    if seed is None:
        if y.value.size != 1:
            raise GraphNotScalar(f"loss has shape {y.value.shape}; pass a seed")
        seed = np.ones_like(y.value)
    grads = {id(y): np.asarray(seed, dtype=float)}
    keep = {id(w) for w in wrt}
    for node in reversed(_topological(y)):
        g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
        if g is None:
            continue
        for p, f in zip(node.parents, node.vjps):
            gp = f(g)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def jacobian(fn, x):
    """Jacobian of ``fn`` at the 1-D point ``x``, one reverse pass per output."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeMismatch("jacobian expects a 1-D input")
    xv = Var(x)
    y = fn(xv)
    vy = value(y)
    if vy.ndim != 1:
        raise ShapeMismatch("jacobian expects a 1-D output")
    rows = []
    for i in range(vy.size):
        seed = np.zeros_like(vy)
        seed[i] = 1.0
        rows.append(grad(y, [xv], seed)[0])
    return np.stack(rows)


# ---------------------------------------------------------------------------
# tanh MLP over a flat parameter vector


def n_params(sizes):
    return int(sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:])))


def unpack(theta, sizes):
    """Split the flat vector into ``[(W, b), ...]`` with ``W`` of shape (in, out)."""
    if value(theta).shape != (n_params(sizes),):
        raise ShapeMismatch(f"expected {n_params(sizes)} parameters for sizes {tuple(sizes)}")
    layers, k = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = reshape(theta[k:k + a * b], (a, b))
        k += a * b
        layers.append((W, theta[k:k + b]))
        k += b
    return layers


def init_params(sizes, rng, output_scale=0.1):
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``output_scale``."""
    parts = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (a + b))
        W = rng.uniform(-lim, lim, size=(a, b))
        if i == len(sizes) - 2:
            W = W * output_scale
        parts += [W.ravel(), np.zeros(b)]
    return np.concatenate(parts)


def mlp_forward(theta, x, sizes):
    """tanh hidden layers, linear output; ``x`` is (batch, in)."""
    if value(x).shape[-1] != sizes[0]:
        raise ShapeMismatch(f"input dim {value(x).shape[-1]} != {sizes[0]}")
    layers = unpack(theta, sizes)
    h = x
    for W, b in layers[:-1]:
        h = tanh(h @ W + b)
    W, b = layers[-1]
    return h @ W + b


def mlp_forward_jac(theta, x, sizes):
    """Outputs and input-Jacobians ``d out / d in`` of shape (batch, out, in)."""
    if value(x).shape[-1] != sizes[0]:
        raise ShapeMismatch(f"input dim {value(x).shape[-1]} != {sizes[0]}")
    layers = unpack(theta, sizes)
    h = x
    M = None
    for W, b in layers[:-1]:
        h = tanh(h @ W + b)
        slope = 1.0 - h * h
        lin = W.T if M is None else W.T @ M
        M = reshape(slope, value(slope).shape + (1,)) * lin
    W, b = layers[-1]
    out = h @ W + b
    J = W.T if M is None else W.T @ M
    if value(J).ndim == 2:
        J = J + np.zeros(value(out).shape[:1] + value(J).shape)
    return out, J


def lipschitz_bound(theta, sizes):
    """Product of layer spectral norms; tanh is 1-Lipschitz."""
    return float(np.prod([np.linalg.norm(value(W), 2) for W, _ in unpack(value(theta), sizes)]))
