"""Dense float64 arithmetic and a small tape-based reverse-mode differentiator.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every primitive
accepts an optional leading batch axis; reductions and the softmax family act
on the last axis.

Example::

    g = ExprGraph()
    a = g.leaf(np.array(3.0), "a")
    out = g.mul(a, a)
    reverse_grad(g, out).grads["a"]   # -> array(6.)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, DimensionError, NumericError


def as_tensor(value, name="tensor"):
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what}: non-finite input")


# ---------------------------------------------------------------------------
# Eager numeric kernels
# ---------------------------------------------------------------------------

def eval_affine(W, v, b=None):
    """Return ``W @ v + b``; ``v`` may carry a leading batch axis."""
    W = np.asarray(W, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_affine_shapes(W.shape, v.shape, None if b is None else np.shape(b))
    out = v @ W.T
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)
    return out


def _check_affine_shapes(w_shape, v_shape, b_shape):
    if len(w_shape) != 2:
        raise DimensionError(f"affine: W must be a matrix, got shape {w_shape}")
    if len(v_shape) not in (1, 2) or v_shape[-1] != w_shape[1]:
        raise DimensionError(
            f"affine: v has shape {v_shape}, expected (..., {w_shape[1]}) to match W {w_shape}"
        )
    if b_shape is not None and tuple(b_shape) != (w_shape[0],):
        raise DimensionError(f"affine: b has shape {tuple(b_shape)}, expected ({w_shape[0]},)")


def eval_log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    _require_finite(logits, "log_softmax")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def eval_softmax(logits):
    """Numerically stable softmax over the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    _require_finite(logits, "softmax")
    if logits.shape[-1] < 2:
        raise ContractError("softmax needs at least two classes")
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def eval_pred_entropy(logits):
    """Shannon entropy (nats) of softmax(logits), per row.

    Computed as ``-sum(p * log_softmax)``, so entries whose probability
    underflows contribute exactly zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 2:
        raise ContractError("entropy needs at least two classes")
    logp = eval_log_softmax(logits)
    h = -(np.exp(logp) * logp).sum(axis=-1)
    return np.maximum(h, 0.0)


def eval_cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` evaluated in log space."""
    logits = np.asarray(logits, dtype=np.float64)
    label = np.asarray(label)
    C = logits.shape[-1]
    if np.any(label < 0) or np.any(label >= C):
        raise IndexError(f"label {label} out of range for {C} classes")
    logp = eval_log_softmax(logits)
    if logp.ndim == 1:
        return -logp[int(label)]
    return -logp[np.arange(logp.shape[0]), label.astype(int)]


def eval_kl(logits_p, logits_q):
    """KL(softmax(p) || softmax(q)) per row."""
    lp = eval_log_softmax(logits_p)
    lq = eval_log_softmax(logits_q)
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Expression graph
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("index", "op", "value", "parents", "vjp", "name", "needs_grad")

    def __init__(self, index, op, value, parents, vjp, name, needs_grad):
        self.index = index
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.index}, {self.op}, shape={self.value.shape})"


@dataclass
class GradResult:
    value: np.ndarray
    grads: dict = field(default_factory=dict)


class ExprGraph:
    """Append-only tape; insertion order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}

    def _push(self, op, value, parents=(), vjp=None, name=None, needs_grad=None):
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        node = Node(len(self.nodes), op, value, tuple(parents), vjp, name, needs_grad)
        self.nodes.append(node)
        return node

    def _own(self, *nodes):
        for n in nodes:
            if not isinstance(n, Node) or n.index >= len(self.nodes) or self.nodes[n.index] is not n:
                raise ContractError(f"{n!r} does not belong to this graph")

    # leaves -------------------------------------------------------------

    def leaf(self, value, name):
        """Differentiable input identified by ``name``."""
        if name in self.leaves:
            raise ContractError(f"duplicate leaf name {name!r}")
        node = self._push("leaf", as_tensor(value, name), name=name, needs_grad=True)
        self.leaves[name] = node
        return node

    def const(self, value, name=None):
        return self._push("const", as_tensor(value, name or "const"), name=name, needs_grad=False)

    # linear -------------------------------------------------------------

    def affine(self, W, v, b=None):
        """``v @ W.T + b`` with W (m, n), v (n,) or (B, n), b (m,)."""
        parents = (W, v) if b is None else (W, v, b)
        self._own(*parents)
        _check_affine_shapes(W.shape, v.shape, None if b is None else b.shape)
        out = v.value @ W.value.T
        if b is not None:
            out = out + b.value
        Wv, vv = W.value, v.value

        def vjp(g):
            if vv.ndim == 1:
                gW = np.outer(g, vv)
                gb = g
            else:
                gW = g.T @ vv
                gb = g.sum(axis=0)
            grads = [gW, g @ Wv]
            if b is not None:
                grads.append(gb)
            return grads

        return self._push("affine", out, parents, vjp)

    def _same_shape(self, op, a, b):
        self._own(a, b)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")

    def add(self, a, b):
        self._same_shape("add", a, b)
        return self._push("add", a.value + b.value, (a, b), lambda g: [g, g])

    def sub(self, a, b):
        self._same_shape("sub", a, b)
        return self._push("sub", a.value - b.value, (a, b), lambda g: [g, -g])

    def mul(self, a, b):
        self._same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._push("mul", av * bv, (a, b), lambda g: [g * bv, g * av])

    def scale(self, a, c):
        self._own(a)
        c = float(c)
        return self._push("scale", a.value * c, (a,), lambda g: [g * c])

    def add_scalar(self, a, c):
        self._own(a)
        return self._push("add_scalar", a.value + float(c), (a,), lambda g: [g])

    # elementwise nonlinearities ----------------------------------------

    def tanh(self, a):
        self._own(a)
        y = np.tanh(a.value)
        return self._push("tanh", y, (a,), lambda g: [g * (1.0 - y * y)])

    def relu(self, a):
        self._own(a)
        mask = a.value > 0
        return self._push("relu", np.where(mask, a.value, 0.0), (a,), lambda g: [g * mask])

    def identity(self, a):
        self._own(a)
        return self._push("identity", a.value.copy(), (a,), lambda g: [g])

    # softmax family (last axis) ----------------------------------------

    def softmax(self, a):
        self._own(a)
        s = eval_softmax(a.value)

        def vjp(g):
            return [s * (g - (g * s).sum(axis=-1, keepdims=True))]

        return self._push("softmax", s, (a,), vjp)

    def log_softmax(self, a):
        self._own(a)
        if a.shape[-1] < 2:
            raise ContractError("log_softmax needs at least two classes")
        ls = eval_log_softmax(a.value)
        s = np.exp(ls)

        def vjp(g):
            return [g - s * g.sum(axis=-1, keepdims=True)]

        return self._push("log_softmax", ls, (a,), vjp)

    # reductions / selection --------------------------------------------

    def sum(self, a, axis=None):
        """Sum all entries (``axis=None``) or the last axis (``axis=-1``)."""
        self._own(a)
        if axis is None:
            shape = a.shape
            return self._push("sum", np.array(a.value.sum()), (a,), lambda g: [np.full(shape, float(g))])
        if axis != -1:
            raise ContractError("sum supports axis=None or axis=-1 only")
        return self._push(
            "sum_last", a.value.sum(axis=-1), (a,),
            lambda g: [np.broadcast_to(np.expand_dims(g, -1), a.shape).copy()],
        )

    def pick(self, a, labels):
        """Select ``a[label]`` (vector) or ``a[k, labels[k]]`` (batch)."""
        self._own(a)
        labels = np.asarray(labels, dtype=int)
        C = a.shape[-1]
        if np.any(labels < 0) or np.any(labels >= C):
            raise IndexError(f"labels out of range for {C} classes")
        if a.value.ndim == 1:
            if labels.ndim != 0:
                raise DimensionError("pick on a vector needs a scalar label")
            k = int(labels)

            def vjp(g):
                out = np.zeros(a.shape)
                out[k] = g
                return [out]

            return self._push("pick", np.array(a.value[k]), (a,), vjp)
        if labels.shape != (a.shape[0],):
            raise DimensionError(f"pick: labels shape {labels.shape} vs batch {a.shape[0]}")
        rows = np.arange(a.shape[0])

        def vjp_batch(g):
            out = np.zeros(a.shape)
            out[rows, labels] = g
            return [out]

        return self._push("pick", a.value[rows, labels], (a,), vjp_batch)


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------

def entropy_node(g: ExprGraph, logits: Node) -> Node:
    """Per-row prediction entropy."""
    logp = g.log_softmax(logits)
    p = g.softmax(logits)
    return g.scale(g.sum(g.mul(p, logp), axis=-1), -1.0)


def cross_entropy_node(g: ExprGraph, logits: Node, labels) -> Node:
    """Per-row softmax cross-entropy."""
    return g.scale(g.pick(g.log_softmax(logits), labels), -1.0)


def kl_node(g: ExprGraph, logits_p: Node, logits_q: Node) -> Node:
    """Per-row KL(softmax(p) || softmax(q))."""
    lp = g.log_softmax(logits_p)
    lq = g.log_softmax(logits_q)
    return g.sum(g.mul(g.softmax(logits_p), g.sub(lp, lq)), axis=-1)


def mean_node(g: ExprGraph, a: Node) -> Node:
    return g.scale(g.sum(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def reverse_grad(graph: ExprGraph, output: Node) -> GradResult:
    """Reverse sweep from a scalar ``output`` to every differentiable leaf."""
    graph._own(output)
    if output.value.size != 1 or output.value.ndim > 1:
        raise ContractError(f"reverse_grad needs a scalar output, got shape {output.shape}")
    adj = {output.index: np.ones_like(output.value)}
    for node in reversed(graph.nodes[: output.index + 1]):
        g = adj.pop(node.index, None)
        if g is None or node.vjp is None or not node.needs_grad:
            if node.op == "leaf" and g is not None:
                adj[node.index] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.needs_grad:
                continue
            if parent.index in adj:
                adj[parent.index] = adj[parent.index] + pg
            else:
                adj[parent.index] = pg
    grads = {}
    for name, leaf in graph.leaves.items():
        gl = adj.get(leaf.index)
        grads[name] = np.zeros(leaf.shape) if gl is None else np.array(gl, dtype=np.float64).reshape(leaf.shape)
    return GradResult(value=np.array(output.value), grads=grads)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at probe {k}")
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """``||a - b|| / max(||a||, ||b||, floor)`` in the Euclidean norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
