"""Reverse-mode differentiation over a dynamically recorded graph.

Every operation in this module is polymorphic: called on plain arrays it
computes the result eagerly and returns an array; called with at least one
:class:`Node` argument it records a node whose value is produced by the
very same kernel. Inference code written against these functions therefore
runs unchanged in eager mode and in training mode.
"""

import numpy as np
import scipy.linalg as sla

from . import prox as _prox
from .tensor import DimensionError

__all__ = [
    "Node",
    "leaf",
    "value_of",
    "is_node",
    "record",
    "backward",
    "add",
    "sub",
    "neg",
    "scale",
    "mul",
    "total",
    "linear_forward",
    "linear_adjoint",
    "gram_solve",
    "prox",
    "squared_error",
    "softmax_cross_entropy",
    "OPS",
]


class Node:
    """A recorded value with its parents and vector-Jacobian product."""

    __slots__ = ("value", "parents", "vjp", "op", "grad", "__weakref__")

    # make ndarray defer binary operators to Node
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def is_leaf(self):
        return not self.parents

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by scalars is supported")
        return scale(self, 1.0 / other)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


def leaf(value):
    """Wrap an array as a differentiable leaf."""
    return Node(np.asarray(value, dtype=np.float64))


def is_node(x):
    return isinstance(x, Node)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(value, parents, vjp, op):
    """Return an array in eager mode or a recorded node otherwise.

    ``vjp(g)`` returns one cotangent (or None) per entry of ``parents``.
    """
    if not any(isinstance(p, Node) for p in parents):
        return value
    return Node(value, parents, vjp, op)


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.add(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.subtract(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def neg(a):
    return _make(np.negative(value_of(a)), (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a constant scalar ``c``."""
    c = float(c)
    return _make(c * value_of(a), (a,), lambda g: (c * g,), "scale")


def mul(a, b):
    """Hadamard product."""
    av, bv = value_of(a), value_of(b)
    out = np.multiply(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)), "mul"
    )


def total(a):
    """Sum of all entries."""
    av = value_of(a)
    shape = np.shape(av)
    return _make(np.sum(av), (a,), lambda g: (np.full(shape, g, dtype=np.float64),), "sum")


# -- linear operators --------------------------------------------------------


def _weight(op, weight):
    return op.weight if weight is None else weight


def linear_forward(op, w, weight=None):
    """``B w`` for a :mod:`deepca.linop` operator; ``weight`` may be a node."""
    K = _weight(op, weight)
    Kv, wv = value_of(K), value_of(w)
    out = op.forward(wv, Kv)

    def vjp(g):
        return op.adjoint(g, Kv), op.weight_grad(wv, g)

    return _make(out, (w, K), vjp, f"{op.kind}_forward")


def linear_adjoint(op, v, weight=None):
    """``B^T v``."""
    K = _weight(op, weight)
    Kv, vv = value_of(K), value_of(v)
    out = op.adjoint(vv, Kv)

    def vjp(g):
        # <B^T v, g> = <v, B g>: weight gradient is the forward rule with roles swapped
        return op.forward(g, Kv), op.weight_grad(g, vv)

    return _make(out, (v, K), vjp, f"{op.kind}_adjoint")


def gram_solve(B, r, rho, factor=None):
    """Solve ``(B^T B + rho I) x = r`` for a dense matrix ``B``.

    ``r`` may carry a leading batch dimension (rows). ``factor`` is an
    optional Cholesky factorization from :func:`scipy.linalg.cho_factor`.
    """
    Bv, rv = value_of(B), value_of(r)
    if factor is None:
        factor = sla.cho_factor(Bv.T @ Bv + rho * np.eye(Bv.shape[1]))
    if rv.shape[-1] != Bv.shape[1]:
        raise DimensionError(f"rhs {rv.shape} does not match gram size {Bv.shape[1]}")
    r2 = rv.reshape(-1, Bv.shape[1])
    x2 = sla.cho_solve(factor, r2.T).T
    out = x2.reshape(rv.shape)

    def vjp(g):
        gr2 = sla.cho_solve(factor, g.reshape(-1, Bv.shape[1]).T).T
        # dA = -gr x^T (summed over batch); A = B^T B + rho I  =>  dB = B (dA + dA^T)
        outer = gr2.T @ x2
        gB = -Bv @ (outer + outer.T)
        return gr2.reshape(rv.shape), gB

    return _make(out, (r, B), vjp, "gram_solve")


# -- proximal operators ------------------------------------------------------


def prox(spec, v, bias=None, kink_log=None):
    """Proximal operator of ``spec``; ``bias`` may be a node.

    When ``kink_log`` is a list, the distance of the input to the nearest
    kink is appended to it.
    """
    b = spec.bias if bias is None else bias
    vv = value_of(v)
    bv = value_of(b)
    out = _prox.prox(spec, vv, bias=bv)
    if kink_log is not None:
        kink_log.append(_prox.kink_distance(spec, vv, bias=bv))

    if spec.kind == "nonneg_l1":
        bshape = np.shape(bv)

        def vjp(g):
            gv = _prox.prox_vjp(spec, vv, out, g)
            return gv, -_unbroadcast(gv, bshape)

        return _make(out, (v, b), vjp, "prox_nonneg_l1")

    return _make(out, (v,), lambda g: (_prox.prox_vjp(spec, vv, out, g),), f"prox_{spec.kind}")


# -- losses ------------------------------------------------------------------


def squared_error(pred, target):
    """``0.5 * ||pred - target||^2`` summed over every entry."""
    pv = value_of(pred)
    tv = np.asarray(value_of(target), dtype=np.float64)
    if np.shape(pv) != np.shape(tv):
        raise DimensionError(f"prediction {np.shape(pv)} vs target {np.shape(tv)}")
    r = pv - tv
    out = 0.5 * float(np.dot(r.ravel(), r.ravel()))
    return _make(out, (pred, target), lambda g: (g * r, -g * r), "squared_error")


def softmax_cross_entropy(scores, labels):
    """``-log softmax(scores)[label]`` summed over the batch.

    ``scores`` is ``(K,)`` or ``(N, K)``; ``labels`` are integer classes.
    """
    sv = value_of(scores)
    s2 = np.atleast_2d(sv)
    lab = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    if lab.shape[0] != s2.shape[0]:
        raise DimensionError("one label per score row required")
    if np.any(lab < 0) or np.any(lab >= s2.shape[1]):
        raise ValueError("invalid class index")
    m = s2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s2 - m).sum(axis=1))
    rows = np.arange(s2.shape[0])
    out = float(np.sum(lse - s2[rows, lab]))

    def vjp(g):
        p = np.exp(s2 - lse[:, None])
        p[rows, lab] -= 1.0
        return (g * p.reshape(np.shape(sv)),)

    return _make(out, (scores,), vjp, "softmax_cross_entropy")


# -- generic recording and backward --------------------------------------------


OPS = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "scale": scale,
    "mul": mul,
    "sum": total,
    "matmul": lambda op, w, weight=None: linear_forward(op, w, weight),
    "forward": linear_forward,
    "adjoint": linear_adjoint,
    "gram_solve": gram_solve,
    "prox": prox,
    "squared_error": squared_error,
    "softmax_cross_entropy": softmax_cross_entropy,
}


# argument positions promoted to leaves by ``record``
_PROMOTE = {
    "add": (0, 1),
    "sub": (0, 1),
    "neg": (0,),
    "mul": (0, 1),
    "sum": (0,),
    "scale": (0,),
    "matmul": (1,),
    "forward": (1,),
    "adjoint": (1,),
    "gram_solve": (1,),
    "prox": (1,),
    "squared_error": (0,),
    "softmax_cross_entropy": (0,),
}


def record(op, *inputs, **kwargs):
    """Record ``op`` (a key of ``OPS``) applied to ``inputs``.

    Plain-array data inputs are promoted to leaves so that a node is
    always returned.
    """
    if op not in OPS:
        raise KeyError(f"unknown op {op!r}")
    args = list(inputs)
    for i in _PROMOTE[op]:
        if i < len(args) and not isinstance(args[i], Node):
            args[i] = leaf(args[i])
    return OPS[op](*args, **kwargs)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    on_path = set()
    while stack:
        node, done = stack.pop()
        if done:
            on_path.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            if id(node) in on_path:
                raise RuntimeError("cycle detected in computation graph")
            continue
        seen.add(id(node))
        on_path.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Node):
                if id(p) in on_path:
                    raise RuntimeError("cycle detected in computation graph")
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss):
    """Accumulate gradients of scalar ``loss`` into every reachable node.

    Returns a dict mapping each reachable leaf to its gradient (also
    stored on ``leaf.grad``).
    """
    if not isinstance(loss, Node):
        raise TypeError("backward needs a recorded node")
    if np.size(loss.value) != 1:
        raise ValueError("backward needs a scalar loss")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(np.asarray(loss.value, dtype=np.float64))}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros(np.shape(node.value))
        node.grad = g
        if not node.parents:
            leaves[node] = g
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if not isinstance(p, Node) or gp is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = np.asarray(gp, dtype=np.float64)
    return leaves
