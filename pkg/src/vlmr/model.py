"""Parameter tree and end-to-end similarity pipeline.

Everything trainable lives in one flat dict keyed by canonical path
(gru/*, proj/*, attn/<stage>/w1|w2). A pipeline run embeds the query,
featurizes the proposal grid, optionally reduces it to per-group
surrogates, runs the attention cascade, and yields the scalar similarity;
the same assembly serves training, gradient checking, and inference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import (CcaOutput, cascaded_attention, init_stage_params,
                        stage_names)
from .autodiff import Graph, Node
from .encoders import (QueryRepr, gru_encode, init_gru_params,
                       init_projection_params, pool_proposals, project_pooled)
from .proposals import ProposalGrid
from .surrogate import SurrogateSet, select_surrogates

TABLE_DEFAULT_STRIDE = 8
TABLE_DEFAULT_WINDOWS = (176, 208, 240)


@dataclass
class TrainingConfig:
    """Model dimensions, grid geometry, and optimization settings."""

    margin: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    negatives: int = 1
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    cascade_iterations: int = 2
    stride: int = TABLE_DEFAULT_STRIDE
    window_sizes: tuple[int, ...] = TABLE_DEFAULT_WINDOWS
    d_model: int = 64
    d_attn: int | None = None
    d_hidden: int | None = None
    use_surrogates: bool = True
    share_cross_weights: bool = False

    def __post_init__(self):
        self.window_sizes = tuple(int(w) for w in self.window_sizes)
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.negatives < 1:
            raise ValueError(f"negatives per positive must be >= 1, got {self.negatives}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.cascade_iterations <= 8:
            raise ValueError(f"cascade_iterations must be in [0, 8], got {self.cascade_iterations}")

    @property
    def attn_dim(self) -> int:
        return self.d_attn if self.d_attn is not None else self.d_model

    @property
    def hidden_dim(self) -> int:
        return self.d_hidden if self.d_hidden is not None else self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_sizes"] = list(self.window_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        if "window_sizes" in d:
            d["window_sizes"] = tuple(d["window_sizes"])
        return cls(**d)


def init_params(config: TrainingConfig, d_emb: int, d_raw: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {}
    params.update(init_gru_params(d_emb, config.hidden_dim, rng))
    params.update(init_projection_params(config.hidden_dim, d_raw, config.d_model, rng))
    params.update(init_stage_params(config.attn_dim, config.d_model,
                                    config.cascade_iterations, rng,
                                    config.share_cross_weights))
    return params


def bind_params(graph: Graph, params: dict[str, np.ndarray]) -> dict[str, Node]:
    return {name: graph.param(value, name) for name, value in params.items()}


def bind_stages(leaves: dict[str, Node], config: TrainingConfig) -> dict[str, tuple[Node, Node]]:
    stages = {}
    for name in stage_names(config.cascade_iterations, config.share_cross_weights):
        stages[name] = (leaves[f"attn/{name}/w1"], leaves[f"attn/{name}/w2"])
    return stages


@dataclass
class PipelineResult:
    similarity: Node
    cca: CcaOutput
    query: QueryRepr
    surrogates: SurrogateSet | None
    grid: ProposalGrid
    grid_features: Node


def run_pipeline(graph: Graph, leaves: dict[str, Node], pooled: np.ndarray,
                 grid: ProposalGrid, tokens: np.ndarray,
                 config: TrainingConfig,
                 grid_features: Node | None = None) -> PipelineResult:
    """Build the similarity graph for one (video, query) pair.

    `pooled` is the parameter-free mean-pooled proposal matrix (callers cache
    it per video). When `grid_features` is given, the projected feature node
    is reused so two queries against the same video share the video branch.
    """
    query = gru_encode(graph, leaves, tokens)
    if grid_features is None:
        grid_features = project_pooled(graph, leaves, pooled)

    surrogates = None
    if config.use_surrogates:
        surrogates = select_surrogates(graph, grid_features, grid, query.final)
        video = surrogates.features
    else:
        video = grid_features

    stages = bind_stages(leaves, config)
    cca = cascaded_attention(graph, video, query.matrix, stages,
                             config.cascade_iterations, config.share_cross_weights)
    return PipelineResult(similarity=cca.similarity, cca=cca, query=query,
                          surrogates=surrogates, grid=grid,
                          grid_features=grid_features)


def pipeline_intervals(result: PipelineResult) -> list:
    """The interval each attended video row refers to, in row order."""
    if result.surrogates is not None:
        return list(result.surrogates.chosen_interval)
    return result.grid.intervals_scale_major()


__all__ = ["TrainingConfig", "init_params", "bind_params", "bind_stages",
           "run_pipeline", "pipeline_intervals", "PipelineResult",
           "pool_proposals", "TABLE_DEFAULT_STRIDE", "TABLE_DEFAULT_WINDOWS"]
