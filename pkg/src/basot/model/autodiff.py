"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor records its parents and a backward closure; ``backward`` walks the
tape in reverse topological order. Small by design: only the operations the
network needs, every gradient exact so finite-difference checks are
meaningful.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ..errors import InvalidArgumentError


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bwd")

    def __init__(
        self,
        data,
        parents: Tuple["Tensor", ...] = (),
        bwd: Optional[Callable[["Tensor"], None]] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) into every node reachable from loss."""
    if loss.data.shape != ():
        raise InvalidArgumentError("backward starts from a scalar")
    order = []
    seen = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(out):
        _acc(a, _unbroadcast(out.grad, a.data.shape))
        _acc(b, _unbroadcast(out.grad, b.data.shape))

    return Tensor(a.data + b.data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    def bwd(out):
        _acc(x, c * out.grad)

    return Tensor(c * x.data, (x,), bwd)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        raise InvalidArgumentError("add_n of nothing")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim == 3 and b.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise InvalidArgumentError("batched matmul needs equal batch dims")

    def bwd(out):
        _acc(a, np.matmul(out.grad, np.swapaxes(b.data, -1, -2)))
        _acc(b, np.matmul(np.swapaxes(a.data, -1, -2), out.grad))

    return Tensor(np.matmul(a.data, b.data), (a, b), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def bwd(out):
        _acc(x, out.grad.reshape(old))

    return Tensor(x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(out):
        _acc(x, out.grad.transpose(inv))

    return Tensor(x.data.transpose(axes), (x,), bwd)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bwd(out):
        _acc(x, out.grad * pos)

    return Tensor(x.data * pos, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(out):
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=lead))
        _acc(beta, g.sum(axis=lead))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _acc(x, (gx - m1 - xhat * m2) * inv)

    return Tensor(gamma.data * xhat + beta.data, (x, gamma, beta), bwd)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; mask is an additive array (use -inf to
    forbid positions, every row must keep at least one allowed entry)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(out):
        g = out.grad
        _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor(y, (x,), bwd)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bwd(out):
        g = out.grad
        _acc(x, g - np.exp(logp) * g.sum(axis=-1, keepdims=True))

    return Tensor(logp, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bwd(out):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _acc(table, g)

    return Tensor(table.data[ids], (table,), bwd)


def mean_axis0(x: Tensor) -> Tensor:
    n = x.data.shape[0]

    def bwd(out):
        _acc(x, np.broadcast_to(out.grad / n, x.data.shape).copy())

    return Tensor(x.data.mean(axis=0), (x,), bwd)


def crop_rows(x: Tensor, n: int) -> Tensor:
    if not (0 <= n <= x.data.shape[0]):
        raise InvalidArgumentError("crop outside row range")

    def bwd(out):
        g = np.zeros_like(x.data)
        g[:n] = out.grad
        _acc(x, g)

    return Tensor(x.data[:n], (x,), bwd)


def external_scalar(x: Tensor, value: float, grad_x: np.ndarray) -> Tensor:
    """A scalar loss computed outside the tape, with its gradient w.r.t. x
    supplied; lets pure-numpy losses participate in backward."""
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if grad_x.shape != x.data.shape:
        raise InvalidArgumentError("external gradient shape mismatch")

    def bwd(out):
        _acc(x, float(out.grad) * grad_x)

    return Tensor(np.float64(value), (x,), bwd)
