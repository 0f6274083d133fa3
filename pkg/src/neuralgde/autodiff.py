"""A small reverse-mode tape over numpy arrays.

Every op accepts plain arrays or :class:`Var` nodes.  When no argument is a
``Var`` the op just returns the numpy result, so layer code written against
these functions runs tape-free on arrays and records a graph on ``Var`` inputs.
Each recorded parent carries the vector-Jacobian product of the op with
respect to that parent; :func:`backward` replays them in reverse order.
"""

from __future__ import annotations

import numpy as np

from . import numerics


class Var:
    __slots__ = ("value", "parents", "grad")
    __array_priority__ = 1000.0

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value(x):
    return x.value if isinstance(x, Var) else x


def is_traced(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(out, *pairs):
    parents = tuple((p, fn) for p, fn in pairs if isinstance(p, Var))
    return Var(out, parents)


# --------------------------------------------------------------------------- arithmetic


def add(a, b):
    if not is_traced(a, b):
        return a + b
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _node(va + vb, (a, lambda g: unbroadcast(g, sa)), (b, lambda g: unbroadcast(g, sb)))


def sub(a, b):
    if not is_traced(a, b):
        return a - b
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _node(va - vb, (a, lambda g: unbroadcast(g, sa)), (b, lambda g: -unbroadcast(g, sb)))


def mul(a, b):
    if not is_traced(a, b):
        return a * b
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _node(
        va * vb, (a, lambda g: unbroadcast(g * vb, sa)), (b, lambda g: unbroadcast(g * va, sb))
    )


def div(a, b):
    if not is_traced(a, b):
        return a / b
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    out = va / vb
    return _node(
        out,
        (a, lambda g: unbroadcast(g / vb, sa)),
        (b, lambda g: unbroadcast(-g * out / vb, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return _node(-a.value, (a, lambda g: -g))


def matmul(a, b):
    if not is_traced(a, b):
        return numerics.matmul(a, b)
    va, vb = value(a), value(b)
    out = numerics.matmul(va, vb)
    sa, sb = va.shape, vb.shape
    return _node(
        out,
        (a, lambda g: unbroadcast(np.matmul(g, np.swapaxes(vb, -1, -2)), sa)),
        (b, lambda g: unbroadcast(np.matmul(np.swapaxes(va, -1, -2), g), sb)),
    )


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return _node(out, (a, lambda g: g * out))


def log(a):
    if not isinstance(a, Var):
        return np.log(a)
    va = a.value
    return _node(np.log(va), (a, lambda g: g / va))


def square(a):
    if not isinstance(a, Var):
        return a * a
    va = a.value
    return _node(va * va, (a, lambda g: 2.0 * g * va))


# --------------------------------------------------------------------------- activations


def activation(kind, x, mask=None):
    """Apply an :class:`~neuralgde.numerics.ActivationKind` to ``x``.

    ``mask`` only matters for ``softmax_rows`` (entries outside it get zero weight).
    """
    kind = numerics.ActivationKind.parse(kind)
    if kind.tag == "identity":
        return x
    if kind.tag == "softmax_rows":
        return masked_softmax(x, mask)
    vx = value(x)
    out, deriv = numerics.activation(kind, vx)
    if not isinstance(x, Var):
        return out
    return _node(out, (x, lambda g: g * deriv))


def tanh(x):
    return activation(numerics.TANH, x)


def sigmoid(x):
    return activation(numerics.SIGMOID, x)


def relu(x):
    return activation(numerics.RELU, x)


def masked_softmax(x, mask=None):
    vx = value(x)
    out = numerics.softmax_rows(vx, mask)
    if not isinstance(x, Var):
        return out
    return _node(out, (x, lambda g: numerics.softmax_rows_vjp(out, g)))


# --------------------------------------------------------------------------- shape ops


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    va = a.value
    shape = va.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _node(np.sum(va, axis=axis, keepdims=keepdims), (a, vjp))


def mean(a, axis=None, keepdims=False):
    va = value(a)
    count = va.size if axis is None else np.prod([va.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def swap_last(a):
    """Transpose the last two axes."""
    if not isinstance(a, Var):
        return np.swapaxes(a, -1, -2)
    return _node(np.swapaxes(a.value, -1, -2), (a, lambda g: np.swapaxes(g, -1, -2)))


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    va = a.value

    def vjp(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g) if _is_fancy(idx) else _assign_add(full, idx, g)
        return full

    return _node(va[idx], (a, vjp))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, idx, g):
    full[idx] += g


def concat(xs, axis=-1):
    if not is_traced(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    pairs = []
    for i, x in enumerate(xs):
        lo, hi = int(bounds[i]), int(bounds[i + 1])

        def vjp(g, lo=lo, hi=hi):
            return np.take(g, np.arange(lo, hi), axis=axis)

        pairs.append((x, vjp))
    return _node(out, *pairs)


def broadcast_to(a, shape):
    if not isinstance(a, Var):
        return np.broadcast_to(a, shape)
    old = a.value.shape
    return _node(np.broadcast_to(a.value, shape).copy(), (a, lambda g: unbroadcast(g, old)))


# --------------------------------------------------------------------------- backward pass


def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Var, cotangent=None) -> None:
    """Accumulate ``d<cotangent, output>/d node`` into ``.grad`` of every ancestor.

    Leaves keep their gradient; interior nodes are cleared afterwards so a long
    tape does not pin every intermediate cotangent in memory.
    """
    if not isinstance(output, Var):
        return
    if cotangent is None:
        if output.value.size != 1:
            raise ValueError("a cotangent is required for non-scalar outputs")
        cotangent = np.ones_like(output.value)
    order = _toposort(output)
    grads = {id(output): np.asarray(cotangent, dtype=np.float64).reshape(output.value.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_of(leaf: Var) -> np.ndarray:
    return np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
