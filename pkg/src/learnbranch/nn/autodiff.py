"""A small reverse-mode autodiff over numpy arrays.

Only the operators the branching policies need are provided. Every op records a
closure that pushes the output gradient back into its inputs.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_back")

    def __init__(self, value, requires_grad: bool = False, parents=(), back=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._back = back if self.requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        # ops never write into gradients in place, so sharing g is safe
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None) -> None:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if grad is None else np.asarray(grad, dtype=float)
        for node in reversed(order):
            if node._back is not None and node.grad is not None:
                node._back(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))
    return Tensor(a.value + b.value, parents=(a, b), back=back)


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)

    def back(g):
        a._accumulate(_unbroadcast(g * b.value, a.shape))
        b._accumulate(_unbroadcast(g * a.value, b.shape))
    return Tensor(a.value * b.value, parents=(a, b), back=back)


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor(a.value * s, parents=(a,), back=lambda g: a._accumulate(g * s))


def matmul(a, b) -> Tensor:
    """``(N, k) @ (k, p)`` or ``(N, k) @ (k,)``."""
    a, b = const(a), const(b)
    out = a.value @ b.value

    def back(g):
        if b.value.ndim == 1:
            a._accumulate(np.outer(g, b.value))
            b._accumulate(a.value.T @ g)
        else:
            a._accumulate(g @ b.value.T)
            b._accumulate(a.value.T @ g)
    return Tensor(out, parents=(a, b), back=back)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise ``x W^T + b`` with ``W`` stored as (out, in)."""
    xv, Wv = x.value, W.value
    out = xv @ Wv.T
    if b is not None:
        out = out + b.value

    def back(g):
        x._accumulate(g @ Wv)
        W._accumulate(g.T @ xv)
        if b is not None:
            b._accumulate(g.sum(axis=0))
    parents = (x, W) if b is None else (x, W, b)
    return Tensor(out, parents=parents, back=back)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(a.value * mask, parents=(a,), back=lambda g: a._accumulate(g * mask))


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    factor = np.where(a.value > 0, 1.0, slope)
    return Tensor(a.value * factor, parents=(a,), back=lambda g: a._accumulate(g * factor))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    v = x.value
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def back(g):
        gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.value
            dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)
    return Tensor(out, parents=(x, gain, bias), back=back)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]``; the backward pass scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        x._accumulate(gx)
    return Tensor(x.value[idx], parents=(x,), back=back)


def take(x: Tensor, key) -> Tensor:
    """Basic slicing ``x[key]``."""
    def back(g):
        gx = np.zeros_like(x.value)
        gx[key] += g
        x._accumulate(gx)
    return Tensor(x.value[key], parents=(x,), back=back)


def segment_sum(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_seg,) + x.value.shape[1:])
    np.add.at(out, seg, x.value)
    return Tensor(out, parents=(x,), back=lambda g: x._accumulate(g[seg]))


def segment_mean(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Mean per segment; an empty segment yields zeros."""
    seg = np.asarray(seg, dtype=np.int64)
    count = np.bincount(seg, minlength=n_seg).astype(float)
    denom = np.maximum(count, 1.0).reshape((n_seg,) + (1,) * (x.value.ndim - 1))
    out = np.zeros((n_seg,) + x.value.shape[1:])
    np.add.at(out, seg, x.value)
    out /= denom
    return Tensor(out, parents=(x,), back=lambda g: x._accumulate((g / denom)[seg]))


def segment_softmax(s: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Softmax of the 1-D scores ``s`` within each segment."""
    seg = np.asarray(seg, dtype=np.int64)
    v = s.value
    mx = np.full(n_seg, -np.inf)
    np.maximum.at(mx, seg, v)
    e = np.exp(v - mx[seg])
    tot = np.zeros(n_seg)
    np.add.at(tot, seg, e)
    y = e / tot[seg]

    def back(g):
        dot = np.zeros(n_seg)
        np.add.at(dot, seg, g * y)
        s._accumulate(y * (g - dot[seg]))
    return Tensor(y, parents=(s,), back=back)


def candidate_nll(logits: Tensor, candidates: np.ndarray, graph_of: np.ndarray,
                  targets: np.ndarray) -> Tensor:
    """Mean over graphs of ``-log softmax(logits over that graph's candidates)[target]``.

    ``targets`` holds one row index per graph into ``logits``.
    """
    cand = np.flatnonzero(candidates)
    seg = np.asarray(graph_of, dtype=np.int64)[cand]
    n_graphs = len(targets)
    z = logits.value[cand]
    mx = np.full(n_graphs, -np.inf)
    np.maximum.at(mx, seg, z)
    e = np.exp(z - mx[seg])
    tot = np.zeros(n_graphs)
    np.add.at(tot, seg, e)
    logp_t = logits.value[targets] - mx - np.log(tot)
    loss = -logp_t.mean()

    def back(g):
        p = e / tot[seg]
        gl = np.zeros_like(logits.value)
        gl[cand] = p
        gl[targets] -= 1.0
        logits._accumulate(gl * (g / n_graphs))
    return Tensor(loss, parents=(logits,), back=back)
