import pytest

from vlmr.data import Dataset, SyntheticSpec, generate_synthetic
from vlmr.model import TrainingConfig


def tiny_spec(**overrides):
    base = dict(videos=14, test_videos=4, frames=48, d_raw=8,
                token_range=(4, 6), concept_dim=8, noise=0.1,
                planted_len_range=(12, 24), seed=0)
    base.update(overrides)
    return SyntheticSpec(**base)


def tiny_config(**overrides):
    base = dict(epochs=3, seed=0, d_model=12, stride=8,
                window_sizes=(12, 16, 24), batch_size=5,
                cascade_iterations=1, learning_rate=5e-3)
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic(tiny_spec(), root)
    return Dataset.open(manifest)
