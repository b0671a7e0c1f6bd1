"""Shared fixtures."""

import numpy as np
import pytest

from app.config import ExperimentConfig
from app.synth_data import DatasetSpec, generate
from app.utils import configure_logging

MICRO_CONFIG = dict(
    n_samples=120,
    input_dim=5,
    encoder_hidden=[8],
    encoder_out_dim=6,
    head_hidden=6,
    embed_dim=4,
    num_clusters=3,
    reinit_period=2,
    queue_batches=2,
    total_epochs=5,
    warmup_epochs=2,
    batch_size=16,
    probe_epochs=30,
    seeds=[0],
)


@pytest.fixture(scope="session", autouse=True)
def quiet_logging():
    configure_logging(level="WARNING", log_format="console")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def micro_config(tmp_path) -> ExperimentConfig:
    return ExperimentConfig(**MICRO_CONFIG, output_dir=str(tmp_path / "out"))


@pytest.fixture
def micro_dataset(micro_config):
    return generate(micro_config.dataset_spec())


@pytest.fixture
def small_spec() -> DatasetSpec:
    return DatasetSpec(n_samples=400, input_dim=4, seed=3)
