"""Define-by-run reverse-mode autodiff on float64 arrays.

Ops accept any mix of Node, Tensor, ndarray and python scalars. A Node is
produced whenever at least one operand is a Node; otherwise the result is a
plain Tensor, so the same forward code serves both training (graph built) and
inference (no graph, no overhead beyond the array work).

The graph is rebuilt on every evaluation. backward() walks it once in reverse
topological order and returns gradients for all named leaves.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ContractError, ShapeError
from .tensor import Tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _owned(arr: np.ndarray) -> Tensor:
    """Wrap a freshly allocated array without copying."""
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("non-finite values produced by an operation")
    arr.setflags(write=False)
    t = object.__new__(Tensor)
    object.__setattr__(t, "data", arr)
    return t


class Node:
    """A value in the computation graph plus how to push gradients back."""

    __slots__ = ("value", "grad", "parents", "_vjp", "name")
    __array_ufunc__ = None  # keep numpy from consuming Node operands

    def __init__(self, value: Tensor, parents=(), vjp=None, name=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self._vjp = vjp
        self.name = name

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Node(shape={self.value.shape}{tag})"

    # arithmetic sugar; the module-level functions do the real work
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)

    @property
    def T(self):
        return transpose(self)


def leaf(value, name: str | None = None) -> Node:
    """A graph input; named leaves receive gradients from backward()."""
    t = value if isinstance(value, Tensor) else Tensor(value)
    return Node(t, (), None, name)


def _is_node(x) -> bool:
    return isinstance(x, Node)


def _val(x) -> np.ndarray:
    if isinstance(x, Node):
        return x.value.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(out: np.ndarray, parents, vjps):
    """Node from op output, keeping only Node parents and their vjps."""
    kept = [(p, v) for p, v in zip(parents, vjps) if _is_node(p)]
    if not kept:
        return _owned(out)
    ps = tuple(p for p, _ in kept)
    vs = tuple(v for _, v in kept)
    return Node(_owned(out), ps, lambda g: tuple(v(g) for v in vs))


def primitive(out: np.ndarray, parents, vjps):
    """Escape hatch for custom differentiable ops defined outside this module."""
    return _make(out, parents, vjps)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    av, bv = _val(a), _val(b)
    return _make(av + bv, (a, b),
                 (lambda g: _unbroadcast(g, av.shape),
                  lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _make(av - bv, (a, b),
                 (lambda g: _unbroadcast(g, av.shape),
                  lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return _make(av * bv, (a, b),
                 (lambda g: _unbroadcast(g * bv, av.shape),
                  lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _val(a), _val(b)
    return _make(av / bv, (a, b),
                 (lambda g: _unbroadcast(g / bv, av.shape),
                  lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a):
    av = _val(a)
    return _make(-av, (a,), (lambda g: -g,))


def exp(a):
    av = _val(a)
    out = np.exp(av)
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    av = _val(a)
    return _make(np.log(av), (a,), (lambda g: g / av,))


def sqrt(a):
    av = _val(a)
    out = np.sqrt(av)
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def gelu(a):
    """x * Phi(x) with the exact Gaussian CDF."""
    av = _val(a)
    cdf = 0.5 * (1.0 + erf(av / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
    return _make(av * cdf, (a,), (lambda g: g * (cdf + av * pdf),))


def abs_floor(a, floor: float):
    """max(|a|, floor); gradient is sign(a) where |a| clears the floor."""
    av = _val(a)
    mag = np.abs(av)
    out = np.maximum(mag, floor)
    mask = (mag > floor) * np.sign(av)
    return _make(out, (a,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} x {bv.shape}")
    return _make(av @ bv, (a, b),
                 (lambda g: g @ bv.T,
                  lambda g: av.T @ g))


def transpose(a):
    av = _val(a)
    return _make(av.T.copy(), (a,), (lambda g: g.T,))


def reshape(a, shape):
    av = _val(a)
    return _make(av.reshape(shape).copy(), (a,),
                 (lambda g: g.reshape(av.shape),))


def cols(a, j0: int, j1: int):
    """Column slice [:, j0:j1] of a 2-d operand."""
    av = _val(a)

    def back(g):
        z = np.zeros_like(av)
        z[:, j0:j1] = g
        return z

    return _make(av[:, j0:j1].copy(), (a,), (back,))


def concat(parts, axis: int = 0):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    offsets = np.cumsum([0] + [v.shape[axis] for v in vals])
    vjps = []
    for i in range(len(parts)):
        lo, hi = offsets[i], offsets[i + 1]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(lo, hi)
        vjps.append(lambda g, sl=tuple(sl): np.ascontiguousarray(g[sl]))
    return _make(out, tuple(parts), tuple(vjps))


def _expand_reduced(g, axis, keepdims, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    return _make(np.asarray(out), (a,),
                 (lambda g: _expand_reduced(g, axis, keepdims, av.shape).copy(),))


def mean(a, axis=None, keepdims: bool = False):
    av = _val(a)
    out = av.mean(axis=axis, keepdims=keepdims)
    count = av.size if axis is None else np.prod(
        [av.shape[i] for i in np.atleast_1d(axis)])
    return _make(np.asarray(out), (a,),
                 (lambda g: _expand_reduced(g, axis, keepdims, av.shape) / count,))


def sumsq(a):
    """Frobenius norm squared as a scalar node."""
    return sum_(mul(a, a))


def softmax_rows(a):
    """Row-wise softmax of a 2-d operand."""
    av = _val(a)
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (g - dot) * out

    return _make(out, (a,), (back,))


def pairwise_dist(x):
    """(N, 3) positions to the (N, N) matrix of Euclidean distances.

    Entries at zero distance (the diagonal in particular) get zero gradient,
    which is the exact derivative along the diagonal where the distance is
    identically zero.
    """
    xv = _val(x)
    diff = xv[:, None, :] - xv[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0.0, g / dist, 0.0)
        s = w + w.T
        return s.sum(axis=1, keepdims=True) * xv - s @ xv

    return _make(dist, (x,), (back,))


# ---------------------------------------------------------------------------
# backward


def backward(root: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar root with respect to every named leaf.

    Also stores each visited node's gradient on node.grad. Each node is
    visited exactly once, in reverse topological order.
    """
    if not _is_node(root):
        raise ContractError("backward root must be a Node")
    if root.value.shape != ():
        raise ContractError(f"backward root must be scalar, got {root.value.shape}")

    topo: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    leaf_grads: dict[str, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node.name is not None and not node.parents:
            prev = leaf_grads.get(node.name)
            leaf_grads[node.name] = g if prev is None else prev + g
        if node.parents:
            for p, contrib in zip(node.parents, node._vjp(g)):
                if contrib is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = contrib if acc is None else acc + contrib
    return leaf_grads
