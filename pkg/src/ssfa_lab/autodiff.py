"""Small dense reverse-mode differentiation engine over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  :func:`backward`
topologically sorts the graph reachable from a scalar loss and walks it in
reverse, visiting each node once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "tensor_op",
    "matmul",
    "add",
    "mul",
    "relu",
    "log_softmax",
    "softmax",
    "mean",
    "sum",
    "scale",
    "concat",
    "slice_rows",
    "l2_normalize",
    "exp",
    "neg_entropy",
    "transpose",
    "reshape",
    "backward",
    "sgd_step",
    "grad_check",
]

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives incompatible input shapes."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {desc}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def detach(self) -> "Tensor":
        """Constant view of the same values; gradients stop here."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_lift(other))

    def __rsub__(self, other):
        return add(_lift(other), -self)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.data, b.data

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw, "matmul")


def _broadcast_check(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, a.shape, b.shape) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    av, bv = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def _check_rows(kind, a):
    if a.data.ndim != 2:
        raise ShapeError(kind, a.shape)


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilised by subtracting the row max."""
    _check_rows("log_softmax", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def softmax(a: Tensor) -> Tensor:
    _check_rows("softmax", a)
    z = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (a,), bw, "softmax")


def neg_entropy(a: Tensor) -> Tensor:
    """Per-row sum_j p_j log p_j of softmax(a); shape (n,)."""
    _check_rows("neg_entropy", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    ne = (p * logp).sum(axis=1)

    def bw(g):
        return (g[:, None] * p * (logp - ne[:, None]),)

    return _make(ne, (a,), bw, "neg_entropy")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), bw, "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(a.data.mean(axis=axis), (a,), bw, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, bw, "concat")


def slice_rows(a: Tensor, index) -> Tensor:
    """Select rows with a python slice or an integer index array."""
    if isinstance(index, slice):
        out = a.data[index]
    else:
        index = np.asarray(index, dtype=np.intp)
        if index.size and (index.max() >= a.shape[0] or index.min() < -a.shape[0]):
            raise ShapeError("slice", a.shape, index.shape)
        out = a.data[index]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        if isinstance(index, slice):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), bw, "slice")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    _check_rows("l2_normalize", a)
    norm = np.sqrt((a.data ** 2).sum(axis=1, keepdims=True)) + eps
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _make(y, (a,), bw, "l2_normalize")


def transpose(a: Tensor) -> Tensor:
    _check_rows("transpose", a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


_OPS = {
    "matmul": matmul, "add": add, "mul": mul, "relu": relu,
    "log_softmax": log_softmax, "softmax": softmax, "mean": mean, "sum": sum,
    "scale": scale, "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_rows, "l2_normalize": l2_normalize, "exp": exp,
    "neg_entropy": neg_entropy, "transpose": transpose, "reshape": reshape,
}


def tensor_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``tensor_op("matmul", a, b)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- graph

@dataclass
class Graph:
    """Operations reachable from a root, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def ops(self) -> list:
        return [n for n in self.nodes if not n.is_leaf]

    @property
    def leaves(self) -> list:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> Graph:
    """Populate ``.grad`` on every grad-requiring leaf reachable from ``loss``.

    Gradients are computed fresh (not accumulated across calls).  Tensors in
    ``params`` that the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss) if loss.requires_grad else Graph([])
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    reached = {n.node_id for n in graph.leaves}
    for p in params:
        if p.node_id not in reached:
            p.grad = np.zeros_like(p.data)
    return graph


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """``p <- p - lr * p.grad`` for each tensor; rebinds data, never writes in place."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"sgd_step: parameter {i} ({p.name or p.node_id}) has no gradient")
    for p in params:
        p.data = p.data - lr * p.grad


def grad_check(loss_builder: Callable[[], Tensor], params: Sequence[Tensor],
               fd_step: float = 1e-5) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    The error for each parameter tensor is ``||a - n|| / max(||a||, ||n||, 1e-8)``.
    """
    params = list(params)
    backward(loss_builder(), params)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for i, p in enumerate(params):
        base = p.data
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for j in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[j] += fd_step
            p.data = bumped.reshape(base.shape)
            up = float(loss_builder().data)
            bumped[j] -= 2 * fd_step
            p.data = bumped.reshape(base.shape)
            down = float(loss_builder().data)
            flat[j] = (up - down) / (2 * fd_step)
        p.data = base
        a = analytic[i]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            bad = int(np.flatnonzero(~(np.isfinite(a) & np.isfinite(numeric)).reshape(-1))[0])
            raise FloatingPointError(f"non-finite gradient at parameter {i}, element {bad}")
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    return worst
