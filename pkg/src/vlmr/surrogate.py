"""Surrogate proposal selection.

Within each segment group, the proposal whose feature has the largest
cosine similarity to the final query hidden state becomes the group's
surrogate. Features and the query state are unit vectors, so the dot
product is the cosine. The argmax index is constant for backprop: only
the selected proposals receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Graph, Node, ShapeMismatch
from .proposals import Interval, ProposalGrid


@dataclass
class SurrogateSet:
    """One surrogate per segment group: the K x D feature matrix plus which
    scale won each group and at what similarity."""

    features: Node
    chosen_scale: list[int]
    chosen_interval: list[Interval]
    similarity: list[float]

    @property
    def group_count(self) -> int:
        return len(self.chosen_scale)


def select_surrogates(graph: Graph, grid_features: Node, grid: ProposalGrid,
                      w_final: Node) -> SurrogateSet:
    if grid_features.value.ndim != 2 or grid_features.shape[0] != grid.proposal_count:
        raise ShapeMismatch("select_surrogates", grid_features.shape,
                            (grid.proposal_count,))
    if w_final.value.ndim != 1 or w_final.shape[0] != grid_features.shape[1]:
        raise ShapeMismatch("select_surrogates", grid_features.shape, w_final.shape)

    features = graph.select_best_rows(grid_features, grid.row_matrix(), w_final)
    chosen_scale = [int(c) for c in features.aux["choice"]]
    similarity = [float(s) for s in features.value @ w_final.value]
    chosen_interval = [group.windows[scale]
                       for group, scale in zip(grid.groups, chosen_scale)]
    return SurrogateSet(features=features,
                        chosen_scale=chosen_scale,
                        chosen_interval=chosen_interval,
                        similarity=similarity)
