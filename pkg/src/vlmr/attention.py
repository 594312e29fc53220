"""Dense attention unit, alignment scoring, and the cross-modal cascade.

The alignment score between a vector x and a multi-row feature Y is
    E(x, Y) = sum_m tanh((W1 x) . (W2 y_m)).
Dense attention A(X, Y) scores each row of X against Y, softmaxes the
scores, and scales row n of X by its weight a_n, so the output keeps the
N x D shape and the later row-sum of the attended video matrix is a
weighted combination of proposals.

The cascade runs self-attention on each modality once (V2V, Q2Q), then
alternates cross-attention for a configurable number of rounds, updating
the video matrix first and attending the query against the updated video.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node

DEFAULT_CASCADE_ITERATIONS = 2


def stage_names(cascade_iterations: int, share_cross_weights: bool = False) -> list[str]:
    """Attention stages in application order; the final stage scores the
    compact video vector against the attended query."""
    names = ["v2v", "q2q"]
    for i in range(cascade_iterations):
        if share_cross_weights:
            names += ["cross_q2v", "cross_v2q"]
        else:
            names += [f"cross{i}_q2v", f"cross{i}_v2q"]
    names.append("final")
    return names


def init_stage_params(d_attn: int, d_model: int, cascade_iterations: int,
                      rng: np.random.Generator,
                      share_cross_weights: bool = False) -> dict[str, np.ndarray]:
    bound = np.sqrt(6.0 / (d_attn + d_model))
    params = {}
    for name in stage_names(cascade_iterations, share_cross_weights):
        key = f"attn/{name}"
        if f"{key}/w1" in params:
            continue
        params[f"{key}/w1"] = rng.uniform(-bound, bound, size=(d_attn, d_model))
        params[f"{key}/w2"] = rng.uniform(-bound, bound, size=(d_attn, d_model))
    return params


def vla_score(graph: Graph, x: Node, y: Node, w1: Node, w2: Node) -> Node:
    """Scalar alignment score E(x, Y) for a single vector x."""
    u = graph.matmul(w1, x)
    z = graph.matmul(graph.matmul(y, graph.transpose(w2)), u)
    return graph.vec_sum(graph.tanh(z))


def dense_attention(graph: Graph, x: Node, y: Node, w1: Node, w2: Node):
    """Attend X using Y. Returns (attended X, softmax weight vector)."""
    scores = graph.matmul(graph.matmul(x, graph.transpose(w1)),
                          graph.transpose(graph.matmul(y, graph.transpose(w2))))
    per_row = graph.sum_cols(graph.tanh(scores))
    weights = graph.softmax(per_row)
    return graph.scale_rows(x, weights), weights


@dataclass
class CcaOutput:
    attended_v: Node
    attended_q: Node
    v_comp: Node
    similarity: Node
    v_weights: Node
    stage_weights: list[tuple[str, Node]] = field(default_factory=list)


def cascaded_attention(graph: Graph, v: Node, q: Node,
                       stages: dict[str, tuple[Node, Node]],
                       cascade_iterations: int = DEFAULT_CASCADE_ITERATIONS,
                       share_cross_weights: bool = False) -> CcaOutput:
    """Self-attention, cross-attention rounds, compact video vector, and the
    video-query similarity. `stages` maps stage name to its (W1, W2) pair."""
    trace: list[tuple[str, Node]] = []

    v, v_weights = dense_attention(graph, v, v, *stages["v2v"])
    trace.append(("v2v", v_weights))
    q, q_weights = dense_attention(graph, q, q, *stages["q2q"])
    trace.append(("q2q", q_weights))

    for i in range(cascade_iterations):
        key = "cross" if share_cross_weights else f"cross{i}"
        v, v_weights = dense_attention(graph, v, q, *stages[f"{key}_q2v"])
        trace.append((f"cross{i}_q2v", v_weights))
        q, q_weights = dense_attention(graph, q, v, *stages[f"{key}_v2q"])
        trace.append((f"cross{i}_v2q", q_weights))

    v_comp = graph.sum_rows(v)
    similarity = vla_score(graph, v_comp, q, *stages["final"])
    return CcaOutput(attended_v=v, attended_q=q, v_comp=v_comp,
                     similarity=similarity, v_weights=v_weights,
                     stage_weights=trace)
