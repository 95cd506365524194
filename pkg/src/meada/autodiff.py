"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every primitive builds a :class:`Node` that stores its value, its parents and a
closure mapping the upstream gradient to one gradient per parent. Calling
:func:`backward` on a scalar node walks the graph once in reverse topological
order and accumulates gradients into the leaves.

Only float64 is used by the tests. Broadcasting is limited to scalar operands
and a trailing-axis bias add; anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Node", "ShapeError", "leaf", "constant", "backward", "grad",
    "add", "sub", "neg", "mul", "matmul", "transpose", "conv2d", "maxpool2x2",
    "relu", "log", "exp", "softplus", "square", "sum", "mean", "concat",
    "reshape", "log_softmax", "softmax",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class Node:
    __slots__ = ("value", "parents", "op", "grad", "requires_grad", "_backward")

    # lets ndarray + Node dispatch to Node.__radd__
    __array_priority__ = 100

    def __init__(self, value, parents=(), op="leaf", backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.op = op
        self.grad = None
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Node:
    """A differentiable input (parameter or image)."""
    return Node(np.array(value, dtype=DTYPE), requires_grad=True)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, op, backward_fn) -> Node:
    return Node(value, parents, op, backward_fn)


# ---------------------------------------------------------------- elementwise

def _broadcast_kind(op, a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_bias"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_bias"
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum())
    if kind == f"{side}_bias":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    kind = _broadcast_kind("add", a.value, b.value)

    def bw(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.value + b.value, (a, b), "add", bw)


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    kind = _broadcast_kind("sub", a.value, b.value)

    def bw(g):
        return _reduce_to(g, kind, "a"), -_reduce_to(g, kind, "b")

    return _make(a.value - b.value, (a, b), "sub", bw)


def neg(a) -> Node:
    a = _as_node(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    kind = _broadcast_kind("mul", a.value, b.value)
    av, bv = a.value, b.value

    def bw(g):
        return _reduce_to(g * bv, kind, "a"), _reduce_to(g * av, kind, "b")

    return _make(av * bv, (a, b), "mul", bw)


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def softplus(a) -> Node:
    """log(1 + exp(a)), evaluated without overflow."""
    a = _as_node(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = np.exp(-np.logaddexp(0.0, -av))
    return _make(out, (a,), "softplus", lambda g: (g * sig,))


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return _make(av * av, (a,), "square", lambda g: (2.0 * g * av,))


# ----------------------------------------------------------------- reductions

def sum(a, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _as_node(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis), (a,), "sum", bw)


def mean(a, axis=None) -> Node:
    a = _as_node(a)
    shape = a.shape
    n = a.value.size if axis is None else shape[axis]

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.value.mean(axis=axis), (a,), "mean", bw)


# ------------------------------------------------------------------ structure

def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a) -> Node:
    a = _as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.value.T, (a,), "transpose", lambda g: (g.T,))


def concat(nodes: Sequence, axis=0) -> Node:
    nodes = [_as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[v.shape for v in vals]) from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, nodes, "concat", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)

    def bw(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), "matmul", bw)


def _patches(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    s = xp.strides
    view = as_strided(xp, (n, ho, wo, kh, kw, c), (s[0], s[1], s[2], s[1], s[2], s[3]),
                      writeable=False)
    return view.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, w, padding: str = "valid") -> Node:
    """Stride-1 cross-correlation on NHWC input with an (kh, kw, C, F) kernel."""
    x, w = _as_node(x), _as_node(w)
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[3] != wv.shape[2]:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    kh, kw, c, f = wv.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        pads = ((0, 0), (ph, kh - 1 - ph), (pw, kw - 1 - pw), (0, 0))
        xp = np.pad(xv, pads)
    elif padding == "valid":
        pads = None
        xp = np.ascontiguousarray(xv)
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    n, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", xv.shape, wv.shape)
    cols = _patches(xp, kh, kw)
    wmat = wv.reshape(kh * kw * c, f)
    out = (cols @ wmat).reshape(n, ho, wo, f)

    def bw(g):
        g2 = g.reshape(n * ho * wo, f)
        dw = (cols.T @ g2).reshape(wv.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, dw
        # channel-first accumulation keeps every slice add contiguous
        dcols = (wmat @ g2.T).reshape(kh, kw, c, n, ho, wo)
        dxp = np.zeros((c, n, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[i, j]
        dxp = dxp.transpose(1, 2, 3, 0)
        if pads is not None:
            dxp = dxp[:, pads[1][0]:hp - pads[1][1], pads[2][0]:wp - pads[2][1], :]
        return np.ascontiguousarray(dxp), dw

    return _make(out, (x, w), "conv2d", bw)


def maxpool2x2(x) -> Node:
    """2x2 max pooling with stride 2 on NHWC input; odd trailing rows/cols are dropped."""
    x = _as_node(x)
    xv = x.value
    if xv.ndim != 4 or xv.shape[1] < 2 or xv.shape[2] < 2:
        raise ShapeError("maxpool2x2", xv.shape)
    n, h, w, c = xv.shape
    h2, w2 = h // 2, w // 2
    xc = xv[:, :2 * h2, :2 * w2, :]
    win = xc.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        if gx.shape != xv.shape:
            full = np.zeros(xv.shape)
            full[:, :2 * h2, :2 * w2, :] = gx
            gx = full
        return (gx,)

    return _make(out, (x,), "maxpool2x2", bw)


# -------------------------------------------------------------------- softmax

def log_softmax(a) -> Node:
    """Row-wise log-softmax over the last axis of a 2-D node."""
    a = _as_node(a)
    av = a.value
    if av.ndim != 2:
        raise ShapeError("log_softmax", av.shape)
    shifted = av - av.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), "log_softmax", bw)


def softmax(a) -> Node:
    a = _as_node(a)
    av = a.value
    if av.ndim != 2:
        raise ShapeError("softmax", av.shape)
    e = np.exp(av - av.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (a,), "softmax", bw)


# -------------------------------------------------------------------- backward

def _topo_order(root: Node) -> list[Node]:
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
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Fill ``grad`` on every node reachable from ``root`` and return the leaf gradients."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=DTYPE)
            else:
                parent.grad = parent.grad + pg
    return leaves


def grad(fn: Callable[..., Node], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``args``; return (value, gradients)."""
    nodes = [leaf(a) for a in args]
    out = fn(*nodes)
    backward(out)
    return float(out.value), [n.grad if n.grad is not None else np.zeros_like(n.value) for n in nodes]
