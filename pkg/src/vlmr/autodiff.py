"""Minimal reverse-mode automatic differentiation over rank <= 2 float64 tensors.

The operation set is exactly what the retrieval pipeline needs: matrix
products, elementwise arithmetic, tanh/sigmoid/relu, vector softmax, L2
normalization, row reductions, row selection, and an argmax-based row pick
whose index is treated as a constant during backprop. Graphs are built
eagerly on a tape; `backward` walks the tape once in reverse, and
`finite_diff_check` replays the tape under central-difference perturbations
to verify every analytic gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-12


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class GraphError(RuntimeError):
    pass


def _as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 2:
        raise ShapeMismatch("tensor", arr.shape)
    if arr.size == 0 or min(arr.shape) < 1:
        raise ShapeMismatch("tensor", arr.shape)
    return arr


class Node:
    """One record on the tape: a leaf or the output of a primitive."""

    __slots__ = ("graph", "idx", "op", "value", "parents", "aux", "trainable", "name")

    def __init__(self, graph, idx, op, value, parents=(), aux=None,
                 trainable=False, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({tag}, shape={self.value.shape})"


class Graph:
    """A tape of nodes. Construction order is topological by design.

    One graph per loss evaluation; instances share no mutable state, so
    distinct graphs may be used from distinct threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    # ---- leaves ------------------------------------------------------

    def _append(self, op, value, parents=(), aux=None, trainable=False, name=None):
        node = Node(self, len(self.nodes), op, value, parents, aux, trainable, name)
        self.nodes.append(node)
        return node

    def param(self, value, name: str) -> Node:
        """Trainable leaf. Names must be unique; they key the GradientMap."""
        if name in self.params:
            raise GraphError(f"duplicate parameter name: {name}")
        node = self._append("leaf", _as_tensor(value).copy(), trainable=True, name=name)
        self.params[name] = node
        return node

    def constant(self, value, name=None, copy: bool = True) -> Node:
        """Non-trainable leaf. Pass copy=False only for buffers the caller
        guarantees not to mutate (the engine never writes to constants)."""
        arr = _as_tensor(value)
        return self._append("leaf", arr.copy() if copy else arr, name=name)

    # ---- primitives --------------------------------------------------

    def _unary(self, op, a: Node) -> Node:
        return self._append(op, _FORWARD[op]((a.value,), None), (a,))

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeMismatch("add", a.shape, b.shape)
        return self._append("add", a.value + b.value, (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeMismatch("sub", a.shape, b.shape)
        return self._append("sub", a.value - b.value, (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise ShapeMismatch("mul", a.shape, b.shape)
        return self._append("mul", a.value * b.value, (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._append("scale", a.value * float(c), (a,), aux=float(c))

    def add_rowvec(self, x: Node, v: Node) -> Node:
        if x.value.ndim != 2 or v.value.ndim != 1 or x.shape[1] != v.shape[0]:
            raise ShapeMismatch("add_rowvec", x.shape, v.shape)
        return self._append("add_rowvec", x.value + v.value[None, :], (x, v))

    def matmul(self, a: Node, b: Node) -> Node:
        ka = a.shape[-1] if a.value.ndim == 2 else a.shape[0]
        kb = b.shape[0]
        if ka != kb or (a.value.ndim == 1 and b.value.ndim == 1):
            raise ShapeMismatch("matmul", a.shape, b.shape)
        return self._append("matmul", a.value @ b.value, (a, b))

    def transpose(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise ShapeMismatch("transpose", x.shape)
        return self._append("transpose", x.value.T.copy(), (x,))

    def tanh(self, a: Node) -> Node:
        return self._unary("tanh", a)

    def sigmoid(self, a: Node) -> Node:
        return self._unary("sigmoid", a)

    def relu(self, a: Node) -> Node:
        return self._unary("relu", a)

    def softmax(self, v: Node) -> Node:
        if v.value.ndim != 1:
            raise ShapeMismatch("softmax", v.shape)
        return self._unary("softmax", v)

    def normalize(self, v: Node) -> Node:
        """L2-normalize a vector; norms below 1e-12 map to the zero vector."""
        if v.value.ndim != 1:
            raise ShapeMismatch("normalize", v.shape)
        return self._unary("normalize", v)

    def normalize_rows(self, x: Node) -> Node:
        if x.value.ndim != 2:
            raise ShapeMismatch("normalize_rows", x.shape)
        return self._unary("normalize_rows", x)

    def sum_rows(self, x: Node) -> Node:
        """Sum across rows (axis 0): (N, D) -> (D,)."""
        if x.value.ndim != 2:
            raise ShapeMismatch("sum_rows", x.shape)
        return self._unary("sum_rows", x)

    def sum_cols(self, x: Node) -> Node:
        """Sum across columns (axis 1): (N, D) -> (N,)."""
        if x.value.ndim != 2:
            raise ShapeMismatch("sum_cols", x.shape)
        return self._unary("sum_cols", x)

    def vec_sum(self, v: Node) -> Node:
        if v.value.ndim != 1:
            raise ShapeMismatch("vec_sum", v.shape)
        return self._unary("vec_sum", v)

    def dot(self, u: Node, v: Node) -> Node:
        if u.value.ndim != 1 or u.shape != v.shape:
            raise ShapeMismatch("dot", u.shape, v.shape)
        return self._append("dot", np.array([u.value @ v.value]), (u, v))

    def row(self, x: Node, i: int) -> Node:
        if x.value.ndim != 2 or not (0 <= i < x.shape[0]):
            raise ShapeMismatch("row", x.shape, (i,))
        return self._append("row", x.value[i].copy(), (x,), aux=int(i))

    def select_rows(self, x: Node, indices) -> Node:
        indices = [int(i) for i in indices]
        if x.value.ndim != 2 or not indices or not all(0 <= i < x.shape[0] for i in indices):
            raise ShapeMismatch("select_rows", x.shape, (len(indices),))
        return self._append("select_rows", x.value[indices], (x,), aux=tuple(indices))

    def stack_rows(self, vectors) -> Node:
        vectors = list(vectors)
        if not vectors or any(v.value.ndim != 1 for v in vectors):
            raise ShapeMismatch("stack_rows", *(v.shape for v in vectors))
        width = vectors[0].shape[0]
        if any(v.shape[0] != width for v in vectors):
            raise ShapeMismatch("stack_rows", *(v.shape for v in vectors))
        return self._append("stack_rows", np.stack([v.value for v in vectors]), tuple(vectors))

    def scale_rows(self, x: Node, a: Node) -> Node:
        """Row n of the output is a[n] * x[n]."""
        if x.value.ndim != 2 or a.value.ndim != 1 or x.shape[0] != a.shape[0]:
            raise ShapeMismatch("scale_rows", x.shape, a.shape)
        return self._append("scale_rows", x.value * a.value[:, None], (x, a))

    def select_best_row(self, candidates: Node, key: Node) -> Node:
        """Pick the candidate row with the largest dot product against `key`.

        Ties go to the smallest row index. The chosen index is constant for
        backprop: the gradient flows only into the selected row, never into
        `key` or the other rows.
        """
        if candidates.value.ndim != 2 or key.value.ndim != 1 \
                or candidates.shape[1] != key.shape[0]:
            raise ShapeMismatch("select_best_row", candidates.shape, key.shape)
        idx = int(np.argmax(candidates.value @ key.value))
        aux = {"idx": idx, "baseline_idx": idx}
        return self._append("select_best_row", candidates.value[idx].copy(),
                            (candidates, key), aux=aux)

    def select_best_rows(self, x: Node, row_groups: np.ndarray, key: Node) -> Node:
        """Per row-group argmax-by-dot-product selection, one output row per
        group. `row_groups` is a (K, L) integer matrix of row indices into
        `x`; within each group, ties go to the lowest position. As with
        select_best_row, the chosen indices are constants for backprop.
        """
        if x.value.ndim != 2 or key.value.ndim != 1 or x.shape[1] != key.shape[0]:
            raise ShapeMismatch("select_best_rows", x.shape, key.shape)
        row_groups = np.asarray(row_groups, dtype=np.intp)
        if row_groups.ndim != 2 or row_groups.min() < 0 or row_groups.max() >= x.shape[0]:
            raise ShapeMismatch("select_best_rows", x.shape, row_groups.shape)
        scores = x.value @ key.value
        choice = np.argmax(scores[row_groups], axis=1)
        chosen = row_groups[np.arange(row_groups.shape[0]), choice]
        aux = {"rows": row_groups, "choice": choice, "baseline_choice": choice,
               "chosen": chosen}
        return self._append("select_best_rows", x.value[chosen], (x, key), aux=aux)

    # ---- evaluation --------------------------------------------------

    def refresh(self) -> None:
        """Recompute every non-leaf node from current leaf values, in tape
        order. Argmax selections are re-decided from the refreshed values."""
        for node in self.nodes:
            if node.op == "leaf":
                continue
            values = tuple(p.value for p in node.parents)
            if node.op == "select_best_row":
                idx = int(np.argmax(values[0] @ values[1]))
                node.aux["idx"] = idx
                node.value = values[0][idx].copy()
            elif node.op == "select_best_rows":
                rows = node.aux["rows"]
                scores = values[0] @ values[1]
                choice = np.argmax(scores[rows], axis=1)
                chosen = rows[np.arange(rows.shape[0]), choice]
                node.aux["choice"] = choice
                node.aux["chosen"] = chosen
                node.value = values[0][chosen]
            else:
                node.value = _FORWARD[node.op](values, node.aux)

    def selection_nodes(self):
        return [n for n in self.nodes if n.op in ("select_best_row", "select_best_rows")]

    @staticmethod
    def _selection_flipped(node) -> bool:
        if node.op == "select_best_row":
            return node.aux["idx"] != node.aux["baseline_idx"]
        return not np.array_equal(node.aux["choice"], node.aux["baseline_choice"])

    def rebaseline_selections(self) -> None:
        for node in self.selection_nodes():
            if node.op == "select_best_row":
                node.aux["baseline_idx"] = node.aux["idx"]
            else:
                node.aux["baseline_choice"] = node.aux["choice"]

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss with respect to every trainable leaf.

        Leaves with no path to the loss get exact zeros. Visits each node
        at most once (the tape is already topologically ordered).
        """
        if loss.graph is not self:
            raise GraphError("loss node belongs to a different graph")
        if loss.value.shape != (1,):
            raise GraphError(f"loss must be scalar shape (1,), got {loss.value.shape}")

        reachable = np.zeros(len(self.nodes), dtype=bool)
        stack = [loss.idx]
        reachable[loss.idx] = True
        while stack:
            node = self.nodes[stack.pop()]
            for p in node.parents:
                if not reachable[p.idx]:
                    reachable[p.idx] = True
                    stack.append(p.idx)

        grads: dict[int, np.ndarray] = {loss.idx: np.ones(1)}
        for node in reversed(self.nodes):
            if not reachable[node.idx] or node.op == "leaf":
                continue
            g = grads.pop(node.idx, None)
            if g is None:
                continue
            values = tuple(p.value for p in node.parents)
            for parent, pg in zip(node.parents, _VJP[node.op](g, node.value, values, node.aux)):
                if pg is None or (parent.op == "leaf" and not parent.trainable):
                    continue
                acc = grads.get(parent.idx)
                if acc is None:
                    grads[parent.idx] = pg
                else:
                    acc += pg

        out = {}
        for name, leaf in self.params.items():
            g = grads.get(leaf.idx)
            out[name] = g if g is not None else np.zeros_like(leaf.value)
        return out


# ---- forward kernels (shared by construction and tape replay) --------

def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _normalize_vec(v):
    n = math.sqrt(v @ v)
    if n < NORM_EPS:
        return np.zeros_like(v)
    return v / n


def _normalize_rows(x):
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    small = n < NORM_EPS  # NaN norms fall through and propagate
    return np.where(small, 0.0, x) / np.where(small, 1.0, n)


_FORWARD = {
    "add": lambda v, aux: v[0] + v[1],
    "sub": lambda v, aux: v[0] - v[1],
    "mul": lambda v, aux: v[0] * v[1],
    "scale": lambda v, aux: v[0] * aux,
    "add_rowvec": lambda v, aux: v[0] + v[1][None, :],
    "matmul": lambda v, aux: v[0] @ v[1],
    "transpose": lambda v, aux: v[0].T.copy(),
    "tanh": lambda v, aux: np.tanh(v[0]),
    "sigmoid": lambda v, aux: 1.0 / (1.0 + np.exp(-v[0])),
    "relu": lambda v, aux: np.maximum(v[0], 0.0),
    "softmax": lambda v, aux: _softmax(v[0]),
    "normalize": lambda v, aux: _normalize_vec(v[0]),
    "normalize_rows": lambda v, aux: _normalize_rows(v[0]),
    "sum_rows": lambda v, aux: v[0].sum(axis=0),
    "sum_cols": lambda v, aux: v[0].sum(axis=1),
    "vec_sum": lambda v, aux: np.array([v[0].sum()]),
    "dot": lambda v, aux: np.array([v[0] @ v[1]]),
    "row": lambda v, aux: v[0][aux].copy(),
    "select_rows": lambda v, aux: v[0][list(aux)].copy(),
    "stack_rows": lambda v, aux: np.stack(v),
    "scale_rows": lambda v, aux: v[0] * v[1][:, None],
}


# ---- vector-Jacobian products ----------------------------------------

def _vjp_matmul(g, out, values, aux):
    a, b = values
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return g[:, None] * b, a.T @ g
    # (K,) @ (K, M) -> (M,)
    return b @ g, a[:, None] * g


def _vjp_softmax(g, out, values, aux):
    return (out * (g - g @ out),)


def _vjp_normalize(g, out, values, aux):
    (v,) = values
    n = math.sqrt(v @ v)
    if n < NORM_EPS:
        return (np.zeros_like(v),)
    return ((g - (g @ out) * out) / n,)


def _vjp_normalize_rows(g, out, values, aux):
    (x,) = values
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    small = n < NORM_EPS
    dots = (g * out).sum(axis=1, keepdims=True)
    gx = np.where(small, 0.0, g - dots * out) / np.where(small, 1.0, n)
    return (gx,)


def _vjp_row(g, out, values, aux):
    gx = np.zeros_like(values[0])
    gx[aux] = g
    return (gx,)


def _vjp_select_rows(g, out, values, aux):
    gx = np.zeros_like(values[0])
    np.add.at(gx, list(aux), g)
    return (gx,)


def _vjp_select_best_row(g, out, values, aux):
    gc = np.zeros_like(values[0])
    gc[aux["idx"]] = g
    return gc, None


def _vjp_select_best_rows(g, out, values, aux):
    gx = np.zeros_like(values[0])
    np.add.at(gx, aux["chosen"], g)
    return gx, None


_VJP = {
    # the two slots must be distinct objects: stored gradients are mutated
    # in place during accumulation
    "add": lambda g, out, v, aux: (g, g.copy()),
    "sub": lambda g, out, v, aux: (g, -g),
    "mul": lambda g, out, v, aux: (g * v[1], g * v[0]),
    "scale": lambda g, out, v, aux: (g * aux,),
    "add_rowvec": lambda g, out, v, aux: (g, g.sum(axis=0)),
    "matmul": _vjp_matmul,
    "transpose": lambda g, out, v, aux: (g.T.copy(),),
    "tanh": lambda g, out, v, aux: (g * (1.0 - out * out),),
    "sigmoid": lambda g, out, v, aux: (g * out * (1.0 - out),),
    "relu": lambda g, out, v, aux: (g * (v[0] > 0.0),),
    "softmax": _vjp_softmax,
    "normalize": _vjp_normalize,
    "normalize_rows": _vjp_normalize_rows,
    "sum_rows": lambda g, out, v, aux: (np.broadcast_to(g, v[0].shape).copy(),),
    "sum_cols": lambda g, out, v, aux: (np.broadcast_to(g[:, None], v[0].shape).copy(),),
    "vec_sum": lambda g, out, v, aux: (np.full_like(v[0], g[0]),),
    "dot": lambda g, out, v, aux: (g[0] * v[1], g[0] * v[0]),
    "row": _vjp_row,
    "select_rows": _vjp_select_rows,
    "stack_rows": lambda g, out, v, aux: tuple(g[j] for j in range(len(v))),
    "scale_rows": lambda g, out, v, aux: (g * v[1][:, None], (g * v[0]).sum(axis=1)),
    "select_best_row": _vjp_select_best_row,
    "select_best_rows": _vjp_select_best_rows,
}


# ---- finite-difference verification ----------------------------------

@dataclass
class LeafCheck:
    name: str
    max_rel_error: float
    worst_component: int
    tie_adjacent: bool
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    leaves: list[LeafCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(leaf.passed for leaf in self.leaves)

    @property
    def tie_adjacent(self) -> bool:
        return any(leaf.tie_adjacent for leaf in self.leaves)

    @property
    def max_rel_error(self) -> float:
        return max((leaf.max_rel_error for leaf in self.leaves), default=0.0)

    def lines(self):
        for leaf in self.leaves:
            status = "pass" if leaf.passed else "FAIL"
            tie = " tie-adjacent" if leaf.tie_adjacent else ""
            yield (f"{status}  {leaf.name}: max rel err "
                   f"{leaf.max_rel_error:.3e} (component {leaf.worst_component}){tie}")


def finite_diff_check(graph: Graph, loss: Node, tolerance: float = 1e-4,
                      step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central differences, per leaf.

    Relative error per component is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|). Components where an argmax selection
    decided differently at +h or -h are marked tie-adjacent (the numeric
    quotient straddles a routing kink there and is not trustworthy).
    The graph is restored to its unperturbed state before returning.
    """
    graph.refresh()
    graph.rebaseline_selections()
    analytic = graph.backward(loss)
    selections = graph.selection_nodes()
    report = GradCheckReport(tolerance=tolerance)

    def probe(leaf, flat_index, delta):
        original = leaf.value.flat[flat_index]
        leaf.value.flat[flat_index] = original + delta
        graph.refresh()
        value = float(loss.value[0])
        flipped = any(Graph._selection_flipped(n) for n in selections)
        leaf.value.flat[flat_index] = original
        return value, flipped

    for name, leaf in graph.params.items():
        grad = analytic[name]
        worst = 0.0
        worst_component = 0
        tie_adjacent = False
        for i in range(leaf.value.size):
            f_plus, flip_plus = probe(leaf, i, step)
            f_minus, flip_minus = probe(leaf, i, -step)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad.flat[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if flip_plus or flip_minus:
                tie_adjacent = True
            if rel > worst:
                worst = rel
                worst_component = i
        report.leaves.append(LeafCheck(
            name=name, max_rel_error=worst, worst_component=worst_component,
            tie_adjacent=tie_adjacent, passed=worst <= tolerance))

    graph.refresh()
    return report
