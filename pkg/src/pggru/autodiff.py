"""Minimal reverse-mode differentiation on a linear tape.

Every operation appends its output node to the active :class:`Tape`;
:meth:`Tape.backward` walks the tape in reverse and accumulates gradients
into nodes created with ``requires_grad=True`` (directly or transitively).
Broadcasting follows numpy rules and is undone in the backward pass.

Gradients of leaves used as the right operand of many matrix products (the
shared weights of a recurrence) are not summed product by product: the
operand pairs are collected and reduced with one large product at the end
of the backward pass.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_back", "_pending")

    def __init__(self, value, requires_grad=False, back=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self._back = back
        self._pending = None

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _flush(leaf):
    """Reduce deferred matmul operand pairs into the leaf gradient."""
    pend = leaf._pending
    if not pend:
        return
    groups = {}
    for a, g in pend:
        groups.setdefault((a.shape[:-2], g.shape[:-2], a.ndim), []).append((a, g))
    for items in groups.values():
        if items[0][0].ndim == 1:
            for a, g in items:
                leaf._acc(_unbroadcast(np.multiply.outer(a, g), leaf.shape))
            continue
        A = np.concatenate([a for a, _ in items], axis=-2)
        G = np.concatenate([g for _, g in items], axis=-2)
        leaf._acc(_unbroadcast(np.swapaxes(A, -1, -2) @ G, leaf.shape))
    leaf._pending = []


class Tape:
    """Records operations; not thread-safe, one tape per training run."""

    def __init__(self):
        self.nodes = []
        self.leaves = []

    def reset(self):
        self.nodes = []
        self.leaves = []

    def leaf(self, value, requires_grad=True):
        n = Node(np.asarray(value), requires_grad)
        if requires_grad:
            n._pending = []
            self.leaves.append(n)
        return n

    def const(self, value):
        return Node(np.asarray(value), False)

    def _out(self, value, parents, back):
        rg = any(p.requires_grad for p in parents)
        n = Node(value, rg, back if rg else None)
        if rg:
            self.nodes.append(n)
        return n

    def backward(self, loss: Node):
        if loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for n in reversed(self.nodes):
            if n.grad is not None and n._back is not None:
                n._back(n.grad)
        for leaf in self.leaves:
            _flush(leaf)
        self.reset()

    # binary ops -------------------------------------------------------

    def add(self, a, b):
        def back(g):
            if a.requires_grad:
                a._acc(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(g, b.shape))
        return self._out(a.value + b.value, (a, b), back)

    def sub(self, a, b):
        def back(g):
            if a.requires_grad:
                a._acc(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(-g, b.shape))
        return self._out(a.value - b.value, (a, b), back)

    def mul(self, a, b):
        def back(g):
            if a.requires_grad:
                a._acc(_unbroadcast(g * b.value, a.shape))
            if b.requires_grad:
                b._acc(_unbroadcast(g * a.value, b.shape))
        return self._out(a.value * b.value, (a, b), back)

    def matmul(self, a, b):
        """Batched product over the last two axes (numpy matmul semantics)."""
        def back(g):
            if a.requires_grad:
                a._acc(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
            if b.requires_grad:
                if b._pending is not None:
                    b._pending.append((a.value, g))
                else:
                    b._acc(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))
        return self._out(a.value @ b.value, (a, b), back)

    # unary ops --------------------------------------------------------

    def sigmoid(self, a):
        # tanh form cannot overflow
        out = 0.5 * (1.0 + np.tanh(0.5 * a.value))

        def back(g):
            a._acc(g * out * (1.0 - out))
        return self._out(out, (a,), back)

    def tanh(self, a):
        out = np.tanh(a.value)

        def back(g):
            a._acc(g * (1.0 - out * out))
        return self._out(out, (a,), back)

    def index(self, a, idx):
        """Basic (view) indexing: integers and slices."""
        def back(g):
            full = np.zeros_like(a.value)
            full[idx] = g
            a._acc(full)
        return self._out(a.value[idx], (a,), back)

    def stack(self, items, axis=0):
        def back(g):
            for i, it in enumerate(items):
                if it.requires_grad:
                    it._acc(np.take(g, i, axis=axis))
        return self._out(np.stack([it.value for it in items], axis=axis), items, back)

    def concat(self, items, axis=0):
        sizes = np.cumsum([it.shape[axis] for it in items])[:-1]

        def back(g):
            for it, part in zip(items, np.split(g, sizes, axis=axis)):
                if it.requires_grad:
                    it._acc(part)
        return self._out(np.concatenate([it.value for it in items], axis=axis), items, back)

    # reductions -------------------------------------------------------

    def masked_mse(self, pred, target, mask):
        """sum(mask * (pred - target)^2) / sum(mask); target and mask are arrays."""
        cnt = float(mask.sum())
        if cnt == 0:
            raise ValueError("empty loss range")
        d = (pred.value - target) * mask

        def back(g):
            pred._acc((float(g) * 2.0 / cnt) * d)
        return self._out(np.asarray((d * d).sum() / cnt), (pred,), back)

    def sum_squares(self, items, scale=1.0):
        """scale * sum of squares over all entries of all nodes."""
        total = sum(float(np.vdot(it.value, it.value)) for it in items)

        def back(g):
            for it in items:
                if it.requires_grad:
                    it._acc((2.0 * scale * float(g)) * it.value)
        return self._out(np.asarray(scale * total), items, back)
