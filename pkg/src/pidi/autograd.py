"""A small reverse-mode tape over numpy arrays.

Each :class:`Var` remembers its parents and a closure that maps the output
gradient to parent gradients.  Operators are thin wrappers around the pure
forward/backward pairs in :mod:`pidi.tensor`.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self, grad=None):
        backward(self, grad)


def parameter(data, name=None) -> Var:
    return Var(np.asarray(data), requires_grad=True, name=name)


def constant(data) -> Var:
    return data if isinstance(data, Var) else Var(np.asarray(data))


def _make(data, parents, fn):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(data, True, parents, fn)
    return Var(data)


def backward(root: Var, grad=None) -> None:
    """Accumulate gradients into every ``requires_grad`` leaf reachable from ``root``."""
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
            stack.append((p, False))
    grads = {id(root): np.ones_like(root.data) if grad is None else grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    a, b = constant(a), constant(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Var, b: Var) -> Var:
    a, b = constant(a), constant(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def total(vars_) -> Var:
    out = None
    for v in vars_:
        out = v if out is None else add(out, v)
    return out


def conv2d(x: Var, w: Var, spec: T.ConvSpec, bias: Var | None = None) -> Var:
    out = T.conv2d(x.data, w.data, spec, None if bias is None else bias.data)

    def fn(g):
        gx, gw = T.conv2d_backward(g, x.data, w.data, spec)
        gb = None if bias is None else g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, fn)


def relu(x: Var) -> Var:
    return _make(T.relu(x.data), (x,), lambda g: (T.relu_backward(g, x.data),))


def prelu(x: Var, slope: Var) -> Var:
    return _make(T.prelu(x.data, slope.data), (x, slope),
                 lambda g: T.prelu_backward(g, x.data, slope.data))


def sigmoid(x: Var) -> Var:
    y = T.sigmoid(x.data)
    return _make(y, (x,), lambda g: (T.sigmoid_backward(g, y),))


def pool2x2(x: Var, mode: str = "max") -> Var:
    out, idx = T.pool2x2(x.data, mode)
    return _make(out, (x,), lambda g: (T.pool2x2_backward(g, mode, idx),))


def upsample(x: Var, out_h: int, out_w: int) -> Var:
    hw = x.shape[2:]
    return _make(T.upsample_bilinear(x.data, out_h, out_w), (x,),
                 lambda g: (T.upsample_bilinear_backward(g, hw),))


def concat(xs, axis: int = 1) -> Var:
    xs = [constant(v) for v in xs]
    sizes = np.cumsum([v.shape[axis] for v in xs])[:-1]
    return _make(np.concatenate([v.data for v in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def channels(x: Var, start: int, stop: int) -> Var:
    """Channel slice ``x[:, start:stop]``."""
    c = x.shape[1]

    def fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    if start == 0 and stop == c:
        return x
    return _make(x.data[:, start:stop], (x,), fn)


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    """``x @ w.T + b`` for ``x`` of shape (N, F)."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def fn(g):
        grads = (g @ w.data, g.T @ x.data)
        return grads if b is None else grads + (g.sum(axis=0),)

    return _make(out, (x, w) if b is None else (x, w, b), fn)


def batch_norm(x: Var, gamma: Var, beta: Var, running_mean, running_var,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Var:
    """Per-channel batch normalization; updates running statistics in place when training."""
    shape = (1, -1, 1, 1)
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def fn(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = inv.reshape(shape) * (
                gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), fn)
