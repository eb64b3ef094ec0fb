"""Minimal reverse-mode differentiation over 2D float64 arrays.

Each op returns a new :class:`Var` holding its parents and a closure mapping
the output gradient to one gradient per parent. ``Var.backward`` walks the
graph in reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatch

# op name -> multiplier applied to that op's backward output (fault injection)
_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Deliberately corrupt the backward rule of ``op`` inside the block."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "op")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn: Callable | None = None, op: str = "leaf"):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeMismatch(f"{op}: values must be 2D, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        if seed is None:
            if self.value.size != 1:
                raise ShapeMismatch("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node.parents)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            factor = _FAULTS.get(node.op)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if factor is not None:
                    pg = pg * factor
                grads[id(p)] = pg if id(p) not in grads else grads[id(p)] + pg


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


def matmul(a: Var, b: Var) -> Var:
    _check(a.shape[1] == b.shape[0], f"matmul: {a.shape} @ {b.shape}")
    return Var(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul")


def add_bias(a: Var, b: Var) -> Var:
    _check(b.shape == (1, a.shape[1]), f"add_bias: {a.shape} + {b.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_bias")


def add(a: Var, b: Var) -> Var:
    _check(a.shape == b.shape, f"add: {a.shape} + {b.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g), "add")


def relu(a: Var) -> Var:
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def segment_max(a: Var, m: int) -> Var:
    """Max over each run of ``m`` consecutive rows: (B*m, c) -> (B, c).

    The gradient goes to the first row attaining the maximum.
    """
    rows, c = a.shape
    _check(m > 0 and rows % m == 0, f"segment_max: {rows} rows not divisible by {m}")
    v = a.value.reshape(-1, m, c)
    arg = v.argmax(axis=1)
    out = np.take_along_axis(v, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        ga = np.zeros_like(v)
        np.put_along_axis(ga, arg[:, None, :], g[:, None, :], axis=1)
        return (ga.reshape(rows, c),)

    return Var(out, (a,), backward, "segment_max")


def repeat_rows(a: Var, m: int) -> Var:
    """(B, c) -> (B*m, c), each row repeated ``m`` times in place."""
    B, c = a.shape
    return Var(np.repeat(a.value, m, axis=0), (a,), lambda g: (g.reshape(B, m, c).sum(axis=1),), "repeat_rows")


def concat(parts: Sequence[Var]) -> Var:
    """Column-wise concatenation."""
    rows = {p.shape[0] for p in parts}
    _check(len(rows) == 1, f"concat: row counts differ {sorted(rows)}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=1)
    return Var(out, parts, lambda g: tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:])), "concat")


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean negative log-likelihood of integer ``labels``; returns a 1x1 Var."""
    labels = np.asarray(labels).astype(np.int64).ravel()
    n, k = logits.shape
    _check(labels.shape == (n,), f"softmax_cross_entropy: {n} logits vs {labels.shape[0]} labels")
    _check(n > 0 and labels.min() >= 0 and labels.max() < k, "softmax_cross_entropy: label out of range")
    logp = log_softmax(logits.value)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g[0, 0] / n),)

    return Var(np.array([[loss]]), (logits,), backward, "softmax_cross_entropy")


def linear(x: Var, w: Var, b: Var) -> Var:
    return add_bias(matmul(x, w), b)


PRIMITIVES = ("matmul", "add_bias", "add", "relu", "segment_max", "repeat_rows", "concat", "softmax_cross_entropy")
