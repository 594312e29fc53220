"""Query and video encoders.

The query side runs token embeddings through a scratch GRU, keeps every
hidden state, projects each one to the shared dimension D and L2-normalizes
it. The video side mean-pools raw frame features over each proposal window,
projects the pooled vectors to D and row-normalizes. Both sides are built
as autodiff graph nodes so gradients reach the GRU gates and projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ShapeMismatch
from .proposals import ProposalGrid


class EncoderError(ValueError):
    pass


@dataclass
class QueryRepr:
    """All M hidden states as rows of a normalized M x D matrix, plus the
    final state (identical to the last row)."""

    matrix: Node
    final: Node
    word_count: int
    dim: int


GRU_PARAM_NAMES = ("gru/w_z", "gru/u_z", "gru/b_z",
                   "gru/w_r", "gru/u_r", "gru/b_r",
                   "gru/w_h", "gru/u_h", "gru/b_h")


def init_gru_params(d_emb: int, d_hidden: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    for gate in ("z", "r", "h"):
        params[f"gru/w_{gate}"] = _uniform_init((d_emb, d_hidden), rng)
        params[f"gru/u_{gate}"] = _uniform_init((d_hidden, d_hidden), rng)
        params[f"gru/b_{gate}"] = np.zeros(d_hidden)
    return params


def init_projection_params(d_hidden: int, d_raw: int, d_model: int,
                           rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        "proj/query_w": _uniform_init((d_hidden, d_model), rng),
        "proj/query_b": np.zeros(d_model),
        "proj/video_w": _uniform_init((d_raw, d_model), rng),
        "proj/video_b": np.zeros(d_model),
    }


def _uniform_init(shape, rng):
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def gru_encode(graph: Graph, leaves: dict[str, Node], tokens: np.ndarray) -> QueryRepr:
    """Run the GRU over token embeddings and return the projected,
    normalized hidden-state matrix.

    Recurrence, starting from h_0 = 0:
        z_m = sigmoid(x_m W_z + h_{m-1} U_z + b_z)
        r_m = sigmoid(x_m W_r + h_{m-1} U_r + b_r)
        g_m = tanh(x_m W_h + (r_m * h_{m-1}) U_h + b_h)
        h_m = (1 - z_m) * h_{m-1} + z_m * g_m
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise EncoderError(f"tokens must be a non-empty M x D_emb matrix, got {tokens.shape}")
    d_emb = tokens.shape[1]
    if leaves["gru/w_z"].shape[0] != d_emb:
        raise ShapeMismatch("gru_encode", tokens.shape, leaves["gru/w_z"].shape)

    g = graph
    h = g.constant(np.zeros(leaves["gru/w_z"].shape[1]), name="h0")
    states = []
    for m in range(tokens.shape[0]):
        x = g.constant(tokens[m], copy=False)
        z = g.sigmoid(g.add(g.add(g.matmul(x, leaves["gru/w_z"]),
                                  g.matmul(h, leaves["gru/u_z"])),
                            leaves["gru/b_z"]))
        r = g.sigmoid(g.add(g.add(g.matmul(x, leaves["gru/w_r"]),
                                  g.matmul(h, leaves["gru/u_r"])),
                            leaves["gru/b_r"]))
        cand = g.tanh(g.add(g.add(g.matmul(x, leaves["gru/w_h"]),
                                  g.matmul(g.mul(r, h), leaves["gru/u_h"])),
                            leaves["gru/b_h"]))
        # h_new = h - z*h + z*cand
        h = g.add(g.sub(h, g.mul(z, h)), g.mul(z, cand))
        states.append(h)

    projected = g.add_rowvec(g.matmul(g.stack_rows(states), leaves["proj/query_w"]),
                             leaves["proj/query_b"])
    matrix = g.normalize_rows(projected)
    final = g.row(matrix, tokens.shape[0] - 1)
    return QueryRepr(matrix=matrix, final=final,
                     word_count=tokens.shape[0], dim=matrix.shape[1])


def pool_proposals(frames: np.ndarray, grid: ProposalGrid) -> np.ndarray:
    """Mean of the frame rows inside each grid window, scale-major order.
    Pure numpy: the pooling touches no trainable parameter."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise EncoderError(f"frames must be T x D_raw, got {frames.shape}")
    t = frames.shape[0]
    pooled = np.empty((grid.proposal_count, frames.shape[1]))
    for row, iv in enumerate(grid.intervals_scale_major()):
        if iv.start < 0 or iv.end > t:
            raise EncoderError(f"interval [{iv.start}, {iv.end}) outside frame range [0, {t})")
        pooled[row] = frames[iv.start:iv.end].mean(axis=0)
    return pooled


def project_pooled(graph: Graph, leaves: dict[str, Node], pooled: np.ndarray) -> Node:
    p0 = graph.constant(pooled, name="pooled", copy=False)
    projected = graph.add_rowvec(graph.matmul(p0, leaves["proj/video_w"]),
                                 leaves["proj/video_b"])
    return graph.normalize_rows(projected)


def featurize_proposals(graph: Graph, leaves: dict[str, Node],
                        frames: np.ndarray, grid: ProposalGrid) -> Node:
    """(K*L) x D matrix of unit-norm proposal features, scale-major order."""
    return project_pooled(graph, leaves, pool_proposals(frames, grid))
