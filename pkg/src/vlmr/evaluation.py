"""Inference-time localization and the recall/IoU metric suites.

At test time the cascade's final video-updating softmax supplies one weight
per candidate moment; candidates are ranked by that weight, duplicates from
end-of-video clamping collapse to their best score, and recall counts how
often a sufficiently-overlapping candidate appears in the top n. Segment
unit datasets use exact-membership recall plus mean IoU of the top-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph
from .data import Dataset
from .encoders import pool_proposals
from .model import TrainingConfig, bind_params, pipeline_intervals, run_pipeline
from .proposals import Interval, ProposalGrid, temporal_iou
from .training import grid_for_video


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalSample:
    video_id: str
    query_id: str
    gt: Interval


@dataclass
class RankedPrediction:
    """Deduplicated (interval, score) pairs, best first; score ties go to
    the earlier start."""

    entries: list[tuple[Interval, float]]

    def top(self, n: int) -> list[tuple[Interval, float]]:
        return self.entries[:n]


@dataclass
class InferenceResult:
    ranked: RankedPrediction
    intervals: list[Interval]
    weights: np.ndarray
    vla_scores: np.ndarray
    stage_weights: list[tuple[str, np.ndarray]]
    selection: list[tuple[int, int, Interval, float]]  # (group, scale, interval, sim)


def eval_samples(dataset: Dataset, split: str = "test") -> list[EvalSample]:
    samples = []
    for p in dataset.pairs(split):
        if p.gt is None:
            raise EvaluationError(
                f"pair ({p.video_id}, {p.query_id}) has no ground truth interval")
        samples.append(EvalSample(p.video_id, p.query_id, p.gt))
    return samples


def infer_sample(dataset: Dataset, params: dict[str, np.ndarray],
                 config: TrainingConfig, video_id: str, query_id: str,
                 grid: ProposalGrid | None = None,
                 pooled: np.ndarray | None = None) -> InferenceResult:
    """Run the pipeline for one pair and rank its candidate moments."""
    if grid is None:
        grid = grid_for_video(dataset, video_id, config)
    if pooled is None:
        pooled = pool_proposals(dataset.video_features(video_id), grid)

    graph = Graph()
    leaves = bind_params(graph, params)
    result = run_pipeline(graph, leaves, pooled, grid,
                          dataset.query_tokens(query_id), config)

    intervals = pipeline_intervals(result)
    weights = result.cca.v_weights.value.copy()

    # Alignment score of each candidate's original feature against the final
    # attended query, under the final-stage maps; exported for analysis.
    w1 = params["attn/final/w1"]
    w2 = params["attn/final/w2"]
    q_final = result.cca.attended_q.value
    if result.surrogates is not None:
        candidates = result.surrogates.features.value
    else:
        candidates = result.grid_features.value
    vla = np.tanh((candidates @ w1.T) @ (q_final @ w2.T).T).sum(axis=1)

    best: dict[Interval, float] = {}
    for iv, score in zip(intervals, weights):
        score = float(score)
        if iv not in best or score > best[iv]:
            best[iv] = score
    ordered = sorted(best.items(), key=lambda p: (-p[1], p[0].start, p[0].end))

    selection = []
    if result.surrogates is not None:
        ss = result.surrogates
        selection = [(k, ss.chosen_scale[k], ss.chosen_interval[k], ss.similarity[k])
                     for k in range(ss.group_count)]

    return InferenceResult(
        ranked=RankedPrediction(entries=ordered),
        intervals=intervals, weights=weights, vla_scores=vla,
        stage_weights=[(name, node.value.copy())
                       for name, node in result.cca.stage_weights],
        selection=selection)


def rank_proposals(dataset: Dataset, params: dict[str, np.ndarray],
                   config: TrainingConfig, video_id: str,
                   query_id: str) -> RankedPrediction:
    return infer_sample(dataset, params, config, video_id, query_id).ranked


# ---- metrics ------------------------------------------------------------

def recall_at_n_iou(predictions: list[RankedPrediction], samples: list[EvalSample],
                    n: int, m: float) -> float:
    """Fraction of samples with an IoU >= m candidate in their top n."""
    if n < 1:
        raise EvaluationError(f"n must be >= 1, got {n}")
    if not 0 < m <= 1:
        raise EvaluationError(f"IoU threshold must be in (0, 1], got {m}")
    if len(predictions) != len(samples):
        raise EvaluationError("predictions and samples differ in length")
    hits = 0
    for pred, sample in zip(predictions, samples):
        if not pred.entries:
            raise EvaluationError(
                f"empty prediction list for ({sample.video_id}, {sample.query_id})")
        if any(temporal_iou(iv, sample.gt) >= m for iv, _ in pred.top(n)):
            hits += 1
    return hits / len(samples)


def didemo_metrics(predictions: list[RankedPrediction], samples: list[EvalSample],
                   n: int) -> dict[str, float]:
    """Segment-unit scoring: recall by exact interval membership in the top
    n, and mean IoU of the top-1 prediction."""
    if n < 1:
        raise EvaluationError(f"n must be >= 1, got {n}")
    if len(predictions) != len(samples):
        raise EvaluationError("predictions and samples differ in length")
    hits = 0
    ious = []
    for pred, sample in zip(predictions, samples):
        if not pred.entries:
            raise EvaluationError(
                f"empty prediction list for ({sample.video_id}, {sample.query_id})")
        if any(iv == sample.gt for iv, _ in pred.top(n)):
            hits += 1
        ious.append(temporal_iou(pred.entries[0][0], sample.gt))
    return {"recall_at_n": hits / len(samples), "miou": sum(ious) / len(ious)}


def random_baseline(samples: list[EvalSample], grids: dict[str, ProposalGrid],
                    n: int, m: float, trials: int, seed: int) -> float:
    """Monte-Carlo R@n,IoU=m when the top n are drawn uniformly without
    replacement from the video's deduplicated proposal grid."""
    if trials < 1:
        raise EvaluationError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    candidates = {vid: grid.deduplicated_intervals() for vid, grid in grids.items()}
    hits = 0
    for _ in range(trials):
        for sample in samples:
            pool = candidates[sample.video_id]
            take = min(n, len(pool))
            picks = rng.choice(len(pool), size=take, replace=False)
            if any(temporal_iou(pool[i], sample.gt) >= m for i in picks):
                hits += 1
    return hits / (trials * len(samples))


# ---- batch evaluation -----------------------------------------------------

@dataclass
class MetricRow:
    metric: str
    n: int
    iou_threshold: float
    value: float


def evaluate(dataset: Dataset, params: dict[str, np.ndarray], config: TrainingConfig,
             split: str = "test",
             recall_ns: tuple[int, ...] = (1, 5),
             iou_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7),
             baseline_trials: int = 0,
             baseline_seed: int = 0) -> list[MetricRow]:
    """Frame-grid mode: R@n x IoU grid. Segment mode: R@n plus mIoU."""
    samples = eval_samples(dataset, split)
    if not samples:
        raise EvaluationError(f"no samples in split {split!r}")
    grids = {}
    predictions = []
    for s in samples:
        if s.video_id not in grids:
            grids[s.video_id] = grid_for_video(dataset, s.video_id, config)
        predictions.append(infer_sample(dataset, params, config,
                                        s.video_id, s.query_id,
                                        grid=grids[s.video_id]).ranked)

    rows = []
    if dataset.mode == "segment-units":
        for n in recall_ns:
            scores = didemo_metrics(predictions, samples, n)
            rows.append(MetricRow("recall_exact", n, 1.0, scores["recall_at_n"]))
        rows.append(MetricRow("miou", 1, 0.0, didemo_metrics(predictions, samples, 1)["miou"]))
    else:
        for n in recall_ns:
            for m in iou_thresholds:
                rows.append(MetricRow("recall", n, m,
                                      recall_at_n_iou(predictions, samples, n, m)))
        if baseline_trials > 0:
            for n in recall_ns:
                for m in iou_thresholds:
                    rows.append(MetricRow("random_baseline", n, m,
                                          random_baseline(samples, grids, n, m,
                                                          baseline_trials, baseline_seed)))
    return rows


def write_metrics_csv(rows: list[MetricRow], path) -> None:
    lines = ["metric,n,iou_threshold,value"]
    for r in rows:
        lines.append(f"{r.metric},{r.n},{r.iou_threshold!r},{r.value!r}")
    from pathlib import Path
    Path(path).write_text("\n".join(lines) + "\n")
