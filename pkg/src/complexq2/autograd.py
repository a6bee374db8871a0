"""A small reverse-mode tape over real numpy arrays.

Complex values travel as ``CVar`` pairs of real ``Var`` nodes, so every complex
op below is composed from real primitives with closed-form backward rules.
Quantizers enter the graph through ``ste``: the forward value is replaced,
the backward pass is the identity.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .quantize import quantize_dequantize_activation, quantize_dequantize_weights
from .tensor import DEFAULT_EPS, ComplexTensor

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents: tuple[Var, ...] = ()
        self.backward_fn = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self, seed=None):
        backward(self, seed)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward_fn) -> Var:
    out = Var(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        return
    order: list[Var] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.value) if seed is None else np.asarray(seed)}
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
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def relu2(a) -> Var:
    a = as_var(a)
    r = np.maximum(a.value, 0)
    return _node(r * r, (a,), lambda g: (2 * r * g,))


def ste(x, forward_value) -> Var:
    """Straight-through: forward returns ``forward_value``, gradient passes to ``x`` unchanged."""
    x = as_var(x)
    return _node(np.asarray(forward_value, dtype=x.value.dtype), (x,), lambda g: (g,))


# --- shape ---------------------------------------------------------------


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return _node(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat_last(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    d = a.shape[-1]
    return _node(np.concatenate([a.value, b.value], axis=-1), (a, b), lambda g: (g[..., :d], g[..., d:]))


def slice_last(a, start: int, stop: int) -> Var:
    a = as_var(a)

    def bw(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _node(a.value[..., start:stop], (a,), bw)


# --- linear algebra and layers ------------------------------------------


def matmul(x, w) -> Var:
    """``x[..., k] @ w[k, n]``."""
    x, w = as_var(x), as_var(w)
    k = w.shape[0]

    def bw(g):
        gx = g @ w.value.T
        gw = x.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _node(x.value @ w.value, (x, w), bw)


def rmsnorm(x, gain, eps: float = DEFAULT_EPS) -> Var:
    x, gain = as_var(x), as_var(gain)
    xv = x.value
    r = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    xhat = xv * r

    def bw(g):
        gg = g * gain.value
        gx = r * (gg - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0)
        return gx, ggain

    return _node(xhat * gain.value, (x, gain), bw)


def causal_mask(s: int) -> np.ndarray:
    return np.triu(np.ones((s, s), dtype=bool), k=1)


def attention(q, k, v, causal: bool, scale: float) -> Var:
    """Real softmax attention over ``[..., seq, dim]`` inputs."""
    q, k, v = as_var(q), as_var(k), as_var(v)
    s = (q.value @ np.swapaxes(k.value, -1, -2)) * scale
    if causal:
        s = np.where(causal_mask(s.shape[-1]), -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.value

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.value, -1, -2)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = gs @ k.value
        gk = np.swapaxes(gs, -1, -2) @ q.value
        return gq, gk, gv

    return _node(out, (q, k, v), bw)


def embedding(table, ids) -> Var:
    table = as_var(table)
    ids = np.asarray(ids)

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _node(table.value[ids], (table,), bw)


def cross_entropy(logits, targets) -> Var:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logits = as_var(logits)
    targets = np.asarray(targets).reshape(-1)
    z = logits.value.reshape(-1, logits.shape[-1])
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    n = z.shape[0]
    loss = np.mean(lse - z[np.arange(n), targets])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return _node(np.asarray(loss, dtype=logits.value.dtype), (logits,), bw)


# --- complex pairs -------------------------------------------------------


@dataclass
class CVar:
    re: Var
    im: Var

    @classmethod
    def const(cls, t: ComplexTensor) -> "CVar":
        return cls(Var(t.re), Var(t.im))

    @classmethod
    def leaf(cls, t: ComplexTensor) -> "CVar":
        return cls(Var(t.re, requires_grad=True), Var(t.im, requires_grad=True))

    @property
    def shape(self):
        return self.re.shape

    def tensor(self) -> ComplexTensor:
        return ComplexTensor(self.re.value, self.im.value)

    def __add__(self, other: "CVar") -> "CVar":
        return CVar(add(self.re, other.re), add(self.im, other.im))

    def reshape(self, shape) -> "CVar":
        return CVar(reshape(self.re, shape), reshape(self.im, shape))

    def transpose(self, axes) -> "CVar":
        return CVar(transpose(self.re, axes), transpose(self.im, axes))


def c_hermitian_matmul(x: CVar, w: CVar) -> CVar:
    """``conj(x) @ w`` as four real matmuls."""
    re = add(matmul(x.re, w.re), matmul(x.im, w.im))
    im = sub(matmul(x.re, w.im), matmul(x.im, w.re))
    return CVar(re, im)


def c_mul(a: CVar, b: CVar) -> CVar:
    return CVar(sub(mul(a.re, b.re), mul(a.im, b.im)), add(mul(a.re, b.im), mul(a.im, b.re)))


def c_relu2(z: CVar) -> CVar:
    return CVar(relu2(z.re), relu2(z.im))


def c_rmsnorm(x: CVar, gain_re, gain_im, eps: float) -> CVar:
    return CVar(rmsnorm(x.re, gain_re, eps), rmsnorm(x.im, gain_im, eps))


def c_rotate(x: CVar, cos: np.ndarray, sin: np.ndarray) -> CVar:
    """Multiply by the unit phasor ``cos + i sin`` (constants, broadcast against ``x``)."""
    re = sub(mul(x.re, cos), mul(x.im, sin))
    im = add(mul(x.re, sin), mul(x.im, cos))
    return CVar(re, im)


def qat_linear(x: CVar, w: CVar) -> CVar:
    """Quantize-dequantize activations and weights, then ``conj(x_q) @ w_q``.

    Both quantizers are straight-through, so gradients reach ``x`` and ``w``
    as if the quantize/dequantize pairs were identities.
    """
    xq = quantize_dequantize_activation(x.tensor())
    wq = quantize_dequantize_weights(w.tensor())
    xs = CVar(ste(x.re, xq.re), ste(x.im, xq.im))
    ws = CVar(ste(w.re, wq.re), ste(w.im, wq.im))
    return c_hermitian_matmul(xs, ws)
