"""Contrastive training over weak (video, query) pair labels.

A positive pair is one listed in the manifest; negatives are other queries
drawn from the same batch. Each sample rebuilds the full similarity graph
per query (cross-attention entangles the video branch with the query, so
c(V, Q+) and c(V, Q-) need separate cascades) and the hinge
max(0, margin - c_pos + c_neg) drives the update. Training never reads
ground-truth intervals: TrainSample carries ids only.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .data import Dataset
from .model import (TrainingConfig, bind_params, init_params, run_pipeline)
from .encoders import pool_proposals
from .proposals import ProposalGrid, generate_segment_groups, moments_grid

CHECKPOINT_MAGIC = b"VMRC"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSample:
    """Weak label: which query describes which video. No temporal fields."""

    video_id: str
    query_id: str


@dataclass
class EpochStats:
    epoch: int
    mean_pos_sim: float
    mean_neg_sim: float
    loss: float


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainingConfig
    epoch: int
    history: list[EpochStats] = field(default_factory=list)


def contrastive_loss(c_pos: float, c_neg: float, margin: float) -> float:
    """Hinge on the similarity gap: zero once c_pos >= c_neg + margin."""
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    return max(0.0, margin - c_pos + c_neg)


def sample_negatives(batch: list[TrainSample], positive_pairs: set[tuple[str, str]],
                     rng: np.random.Generator, negatives: int = 1) -> list[list[str]]:
    """For each batch element, draw negative query ids uniformly from the
    other elements' queries, excluding queries that the manifest pairs with
    the same video."""
    if len(batch) < 2:
        raise TrainingError("no negatives available: batch has fewer than 2 samples")
    out = []
    for i, sample in enumerate(batch):
        eligible = [other.query_id for j, other in enumerate(batch)
                    if j != i and (sample.video_id, other.query_id) not in positive_pairs]
        if not eligible:
            raise TrainingError(
                f"no negatives available for ({sample.video_id}, {sample.query_id})")
        out.append([eligible[int(rng.integers(len(eligible)))] for _ in range(negatives)])
    return out


def grid_for_video(dataset: Dataset, video_id: str, config: TrainingConfig) -> ProposalGrid:
    length = dataset.manifest.videos[video_id].length
    if dataset.mode == "segment-units":
        return moments_grid(length)
    return generate_segment_groups(length, config.stride, config.window_sizes)


class _Optimizer:
    def __init__(self, config: TrainingConfig):
        self.kind = config.optimizer
        self.lr = config.learning_rate
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.kind == "sgd":
            for name in params:
                params[name] -= self.lr * grads[name]
            return
        # adaptive-moment update
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        self.t += 1
        for name in params:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = beta1 * self.m[name] + (1 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1 - beta2) * g * g
            m_hat = self.m[name] / (1 - beta1 ** self.t)
            v_hat = self.v[name] / (1 - beta2 ** self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + eps)


def sample_loss(dataset: Dataset, params: dict[str, np.ndarray],
                config: TrainingConfig, sample: TrainSample,
                negative_query_ids: list[str],
                pooled: np.ndarray | None = None,
                grid: ProposalGrid | None = None):
    """Build and differentiate one sample's hinge loss. Returns
    (loss value, gradient map, c_pos, mean c_neg)."""
    if grid is None:
        grid = grid_for_video(dataset, sample.video_id, config)
    if pooled is None:
        pooled = pool_proposals(dataset.video_features(sample.video_id), grid)

    graph = Graph()
    leaves = bind_params(graph, params)
    pos = run_pipeline(graph, leaves, pooled, grid,
                       dataset.query_tokens(sample.query_id), config)
    margin_node = graph.constant(np.array([config.margin]))

    hinges = []
    neg_values = []
    for neg_qid in negative_query_ids:
        neg = run_pipeline(graph, leaves, pooled, grid,
                           dataset.query_tokens(neg_qid), config,
                           grid_features=pos.grid_features)
        neg_values.append(float(neg.similarity.value[0]))
        hinges.append(graph.relu(graph.add(graph.sub(margin_node, pos.similarity),
                                           neg.similarity)))
    loss = hinges[0]
    for h in hinges[1:]:
        loss = graph.add(loss, h)
    if len(hinges) > 1:
        loss = graph.scale(loss, 1.0 / len(hinges))

    loss_value = float(loss.value[0])
    if not np.isfinite(loss_value):
        raise TrainingError(
            f"non-finite loss for sample ({sample.video_id}, {sample.query_id})")
    grads = graph.backward(loss)
    return loss_value, grads, float(pos.similarity.value[0]), float(np.mean(neg_values))


def train(dataset: Dataset, config: TrainingConfig,
          on_epoch=None) -> Checkpoint:
    """Full training loop; deterministic in (dataset, config)."""
    train_pairs = dataset.pairs("train")
    if len(train_pairs) < 2:
        raise TrainingError("need at least 2 training pairs")
    samples = [TrainSample(p.video_id, p.query_id) for p in train_pairs]
    positive_pairs = {(p.video_id, p.query_id) for p in dataset.pairs()}

    d_emb, d_raw = dataset.dims()
    rng = np.random.default_rng(config.seed)
    params = init_params(config, d_emb, d_raw, rng)
    optimizer = _Optimizer(config)

    grids = {}
    pooled = {}
    for s in samples:
        if s.video_id not in grids:
            grids[s.video_id] = grid_for_video(dataset, s.video_id, config)
            pooled[s.video_id] = pool_proposals(
                dataset.video_features(s.video_id), grids[s.video_id])

    history: list[EpochStats] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        pos_sims, neg_sims, losses = [], [], []
        for lo in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[lo:lo + config.batch_size]]
            if len(batch) < 2:
                continue  # a trailing singleton has no in-batch negatives
            negatives = sample_negatives(batch, positive_pairs, rng, config.negatives)
            accum = None
            for sample, neg_ids in zip(batch, negatives):
                loss_value, grads, c_pos, c_neg = sample_loss(
                    dataset, params, config, sample, neg_ids,
                    pooled=pooled[sample.video_id], grid=grids[sample.video_id])
                losses.append(loss_value)
                pos_sims.append(c_pos)
                neg_sims.append(c_neg)
                if accum is None:
                    accum = grads
                else:
                    for name in accum:
                        accum[name] += grads[name]
            for name in accum:
                accum[name] /= len(batch)
            optimizer.step(params, accum)
        stats = EpochStats(epoch=epoch,
                           mean_pos_sim=float(np.mean(pos_sims)),
                           mean_neg_sim=float(np.mean(neg_sims)),
                           loss=float(np.mean(losses)))
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)

    return Checkpoint(params=params, config=config, epoch=config.epochs, history=history)


# ---- checkpoint serialization ------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = sorted(ckpt.params)
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "history": [[h.epoch, h.mean_pos_sim, h.mean_neg_sim, h.loss]
                    for h in ckpt.history],
        "params": [[name, list(ckpt.params[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(ckpt.params[name].astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[12:12 + header_len].decode())

    offset = 12 + header_len
    expected = sum(int(np.prod(shape)) for _, shape in header["params"]) * 8
    if len(blob) - offset != expected:
        raise CheckpointError(
            f"{path}: parameter payload is {len(blob) - offset} bytes, expected {expected}")

    params = {}
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(blob[offset:offset + size], dtype="<f8") \
            .reshape(shape).copy()
        offset += size

    config = TrainingConfig.from_dict(header["config"])
    history = [EpochStats(epoch=int(e), mean_pos_sim=p, mean_neg_sim=n, loss=l)
               for e, p, n, l in header["history"]]
    return Checkpoint(params=params, config=config, epoch=int(header["epoch"]),
                      history=history)


def check_compatible(ckpt: Checkpoint, config: TrainingConfig) -> None:
    """Reject structural mismatches between a checkpoint and a declared
    run configuration, with a shape diagnostic."""
    for attr in ("d_model", "d_attn", "d_hidden", "cascade_iterations",
                 "share_cross_weights"):
        have, want = getattr(ckpt.config, attr), getattr(config, attr)
        if have != want:
            raise CheckpointError(
                f"checkpoint {attr}={have!r} does not match declared {attr}={want!r}")


def write_history_csv(history: list[EpochStats], path) -> None:
    lines = ["epoch,mean_pos_sim,mean_neg_sim,loss"]
    for h in history:
        lines.append(f"{h.epoch},{h.mean_pos_sim!r},{h.mean_neg_sim!r},{h.loss!r}")
    Path(path).write_text("\n".join(lines) + "\n")
