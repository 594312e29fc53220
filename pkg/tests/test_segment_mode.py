"""Segment-unit datasets end to end: moments grid with L=1, identity
surrogate selection, exact-membership recall and mean IoU."""

import json

import numpy as np
import pytest

from vlmr.data import Dataset, write_features
from vlmr.evaluation import evaluate, infer_sample
from vlmr.model import TrainingConfig
from vlmr.proposals import enumerate_contiguous_moments
from vlmr.training import grid_for_video, train


@pytest.fixture(scope="module")
def segment_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("segments")
    rng = np.random.default_rng(0)
    segments, d = 6, 8
    videos, queries, pairs = [], [], []
    for i in range(8):
        vid, qid = f"sv{i}", f"sq{i}"
        concept = rng.standard_normal(d)
        concept /= np.linalg.norm(concept)
        start = int(rng.integers(0, segments - 1))
        end = int(rng.integers(start + 1, segments + 1))
        frames = 0.1 * rng.standard_normal((segments, d))
        frames[start:end] += concept
        tokens = concept + 0.1 * rng.standard_normal((int(rng.integers(3, 6)), d))
        write_features(root / f"{vid}.bin", frames)
        write_features(root / f"{qid}.bin", tokens)
        videos.append({"id": vid, "length": segments, "features": f"{vid}.bin"})
        queries.append({"id": qid, "features": f"{qid}.bin"})
        pairs.append({"video": vid, "query": qid, "gt": [start, end],
                      "split": "train" if i < 6 else "test"})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({
        "dataset": "segment-demo", "mode": "segment-units",
        "videos": videos, "queries": queries, "pairs": pairs}))
    return Dataset.open(manifest)


def segment_config(**overrides):
    base = dict(epochs=2, seed=0, d_model=12, cascade_iterations=1,
                batch_size=4, learning_rate=5e-3)
    base.update(overrides)
    return TrainingConfig(**base)


class TestSegmentMode:
    def test_grid_enumerates_all_moments(self, segment_dataset):
        grid = grid_for_video(segment_dataset, "sv0", segment_config())
        assert grid.scales == 1
        assert grid.intervals_scale_major() == enumerate_contiguous_moments(6)

    def test_inference_covers_all_21_moments(self, segment_dataset):
        config = segment_config()
        ckpt = train(segment_dataset, config)
        pair = segment_dataset.pairs("test")[0]
        result = infer_sample(segment_dataset, ckpt.params, config,
                              pair.video_id, pair.query_id)
        assert len(result.ranked.entries) == 21
        # L=1 selection is the identity: every group selects scale 0
        assert [s for _, s, _, _ in result.selection] == [0] * 21

    def test_evaluate_reports_exact_recall_and_miou(self, segment_dataset):
        config = segment_config()
        ckpt = train(segment_dataset, config)
        rows = evaluate(segment_dataset, ckpt.params, config)
        by_metric = {(r.metric, r.n): r.value for r in rows}
        assert ("recall_exact", 1) in by_metric
        assert ("recall_exact", 5) in by_metric
        assert ("miou", 1) in by_metric
        assert by_metric[("recall_exact", 1)] <= by_metric[("recall_exact", 5)]
        for value in by_metric.values():
            assert 0.0 <= value <= 1.0
