"""Minimal reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value is a :class:`ValueNode` holding a ``rows x cols`` matrix. Operations
executed inside a ``with Graph():`` block are recorded and can be differentiated
by :func:`backward`; outside a graph they compute data only, which is what
evaluation passes use. Gradients accumulate (they are never zeroed implicitly),
so the training loop owns the reset between minibatches.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Append-only record of operation nodes, in construction order.

    Construction order is a topological order, so one reverse sweep over
    ``nodes`` is a complete backward pass.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[ValueNode] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False


def active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class ValueNode:
    """A dense float64 matrix plus an optional gradient accumulator.

    ``op`` names the primitive that produced the node ("leaf" for inputs and
    parameters) and ``parents`` holds the argument nodes, which is enough
    provenance to inspect a recorded graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "graph", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"ValueNode data must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.op = op
        self.parents = parents
        self.graph: Graph | None = None
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"ValueNode(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def leaf(data, requires_grad: bool = False) -> ValueNode:
    """Wrap a matrix as a leaf node (a parameter if requires_grad)."""
    return ValueNode(data, requires_grad=requires_grad)


def record_op(data: np.ndarray, op: str, parents: tuple, backward_fn) -> ValueNode:
    """Create an op node; track it only inside a graph with a grad-needing input.

    This is also the extension point for fused operations defined outside this
    module: backward_fn receives the node's accumulated output gradient and
    must add each parent's contribution into its grad buffer.
    """
    g = active_graph()
    if g is None or not any(p.requires_grad for p in parents):
        return ValueNode(data, requires_grad=False, op=op, parents=parents)
    node = ValueNode(data, requires_grad=True, op=op, parents=parents)
    node.graph = g
    node._backward = backward_fn
    g.nodes.append(node)
    return node


_record = record_op


def _check_same_shape(op: str, a: ValueNode, b: ValueNode):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives

def matmul(a: ValueNode, b: ValueNode) -> ValueNode:
    """Matrix product a @ b with the usual transpose-product backward."""
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.grad is not None:
            a.grad += g @ b.data.T
        if b.grad is not None:
            b.grad += a.data.T @ g

    return _record(out, "matmul", (a, b), bwd)


def add(a: ValueNode, b: ValueNode) -> ValueNode:
    _check_same_shape("add", a, b)

    def bwd(g):
        if a.grad is not None:
            a.grad += g
        if b.grad is not None:
            b.grad += g

    return _record(a.data + b.data, "add", (a, b), bwd)


def mul(a: ValueNode, b: ValueNode) -> ValueNode:
    _check_same_shape("mul", a, b)

    def bwd(g):
        if a.grad is not None:
            a.grad += g * b.data
        if b.grad is not None:
            b.grad += g * a.data

    return _record(a.data * b.data, "mul", (a, b), bwd)


def sigmoid(x: ValueNode) -> ValueNode:
    # 1/(1+exp(-x)) evaluated branch-free; float64 saturates gracefully.
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        if x.grad is not None:
            x.grad += g * (s * (1.0 - s))

    return _record(s, "sigmoid", (x,), bwd)


def tanh(x: ValueNode) -> ValueNode:
    t = np.tanh(x.data)

    def bwd(g):
        if x.grad is not None:
            x.grad += g * (1.0 - t * t)

    return _record(t, "tanh", (x,), bwd)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "add": add, "mul": mul}


def elementwise(kind: str, *args: ValueNode) -> ValueNode:
    """Dispatch an elementwise primitive by name: sigmoid|tanh|add|mul."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


def add_rowvec(x: ValueNode, v: ValueNode) -> ValueNode:
    """Broadcast-add a 1 x d row vector to every row of a T x d matrix."""
    if v.data.shape != (1, x.data.shape[1]):
        raise ValueError(f"add_rowvec: expected row vector (1, {x.data.shape[1]}), got {v.data.shape}")

    def bwd(g):
        if x.grad is not None:
            x.grad += g
        if v.grad is not None:
            v.grad += g.sum(axis=0, keepdims=True)

    return _record(x.data + v.data, "add_rowvec", (x, v), bwd)


def concat_cols(a: ValueNode, b: ValueNode) -> ValueNode:
    """Column concatenation [a | b]; backward splits at a's width."""
    if a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"concat_cols: row counts differ, {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[1]

    def bwd(g):
        if a.grad is not None:
            a.grad += g[:, :split]
        if b.grad is not None:
            b.grad += g[:, split:]

    return _record(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b), bwd)


def slice_cols(x: ValueNode, start: int, stop: int) -> ValueNode:
    def bwd(g):
        if x.grad is not None:
            x.grad[:, start:stop] += g

    return _record(np.ascontiguousarray(x.data[:, start:stop]), "slice_cols", (x,), bwd)


def slice_rows(x: ValueNode, start: int, stop: int) -> ValueNode:
    def bwd(g):
        if x.grad is not None:
            x.grad[start:stop] += g

    return _record(np.ascontiguousarray(x.data[start:stop]), "slice_rows", (x,), bwd)


def stack_rows(rows: Sequence[ValueNode]) -> ValueNode:
    """Stack T nodes of shape 1 x d into a T x d node."""
    if not rows:
        raise ValueError("stack_rows: need at least one row")
    width = rows[0].data.shape[1]
    for r in rows:
        if r.data.shape != (1, width):
            raise ValueError(f"stack_rows: expected rows of shape (1, {width}), got {r.data.shape}")
    parents = tuple(rows)

    def bwd(g):
        for i, r in enumerate(parents):
            if r.grad is not None:
                r.grad += g[i:i + 1]

    return _record(np.concatenate([r.data for r in rows], axis=0), "stack_rows", parents, bwd)


def sum_all(x: ValueNode) -> ValueNode:
    """Sum of all entries, as a 1 x 1 node."""
    def bwd(g):
        if x.grad is not None:
            x.grad += g  # scalar broadcast

    return _record(np.array([[np.sum(x.data)]]), "sum_all", (x,), bwd)


def scale(x: ValueNode, factor: float) -> ValueNode:
    def bwd(g):
        if x.grad is not None:
            x.grad += g * factor

    return _record(x.data * factor, "scale", (x,), bwd)


def softmax_cross_entropy(logits: ValueNode, labels) -> ValueNode:
    """Fused per-frame cross entropy of row-softmax posteriors at integer labels.

    Returns a T x 1 node with ce[t] = -log softmax(logits[t])[labels[t]],
    computed through a max-shifted log-sum-exp so large logits stay finite.
    The backward rule is softmax(logits[t]) - onehot(labels[t]) scaled by the
    upstream per-frame gradient.
    """
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    t, k = logits.data.shape
    if lab.shape[0] != t:
        raise ValueError(f"softmax_cross_entropy: {lab.shape[0]} labels for {t} frames")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k}): "
                         f"min={lab.min()}, max={lab.max()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    probs = np.exp(z - lse)
    rows = np.arange(t)
    ce = (lse[:, 0] - z[rows, lab]).reshape(t, 1)

    def bwd(g):
        if logits.grad is not None:
            gl = probs * g  # g is T x 1, broadcasts over classes
            gl[rows, lab] -= g[:, 0]
            logits.grad += gl

    return _record(ce, "softmax_cross_entropy", (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle

def backward(graph: Graph, root: ValueNode):
    """Populate gradients of everything root depends on, by one reverse sweep.

    root must be a 1 x 1 node recorded in graph. Calling backward twice on the
    same graph is an error; gradients from successive graphs accumulate into
    shared leaves until the caller zeroes them.
    """
    if root.data.shape != (1, 1):
        raise ValueError(f"backward: root must be 1x1, got shape {root.data.shape}")
    if graph.consumed:
        raise RuntimeError("backward: this graph has already been differentiated")
    if root.graph is not graph:
        if root.op == "leaf" and root.requires_grad:
            # d root / d root = 1; nothing upstream of a parameter leaf
            graph.consumed = True
            root.grad += 1.0
            return
        raise ValueError("backward: root was not recorded in this graph")
    graph.consumed = True
    root.grad += 1.0
    for node in reversed(graph.nodes):
        fn = node._backward
        if fn is not None:
            fn(node.grad)


def check_gradients(f, theta: np.ndarray, h: float = 1e-5) -> float:
    """Compare f's analytic gradient against central finite differences.

    f maps a flat parameter vector to ``(value, gradient)`` where gradient is
    the analytic d value / d theta, and must be deterministic. Returns the max
    over coordinates of |g_a - g_c| / max(|g_a| + |g_c|, 1e-8) with
    g_c = (f(theta + h e) - f(theta - h e)) / 2h.
    """
    if h <= 0:
        raise ValueError("check_gradients: h must be positive")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    value, grad = f(theta)
    if not np.isfinite(value):
        raise FloatingPointError(f"check_gradients: f(theta) is not finite: {value}")
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.shape != theta.shape:
        raise ValueError(f"check_gradients: gradient shape {grad.shape} != theta shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("check_gradients: analytic gradient is not finite")

    worst = 0.0
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        f_plus, _ = f(probe)
        probe[i] = theta[i] - h
        f_minus, _ = f(probe)
        probe[i] = theta[i]
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"check_gradients: non-finite f at coordinate {i}")
        g_c = (f_plus - f_minus) / (2.0 * h)
        rel = abs(grad[i] - g_c) / max(abs(grad[i]) + abs(g_c), 1e-8)
        if rel > worst:
            worst = rel
    return worst
