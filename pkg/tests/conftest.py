import sys
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from hfn_anomaly.dataset import SeriesFrame
from hfn_anomaly.models import VariableSchema
from hfn_anomaly.config import ModelConfig, SynthConfig, TrainConfig

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture()
def schema() -> VariableSchema:
    return VariableSchema.of(("c0", "c"), ("c1", "c"), ("d0", "d"), ("c2", "c"))


@pytest.fixture()
def small_config() -> ModelConfig:
    return ModelConfig(window=4, embed_dim=6, hidden_dim=3, heads=2, mask_p=0.0)


@pytest.fixture()
def small_train_config(small_config: ModelConfig) -> TrainConfig:
    return TrainConfig(model=small_config, lr=1e-2, batch_size=16, max_epochs=3)


@pytest.fixture()
def tiny_synth() -> SynthConfig:
    return SynthConfig(
        n_continuous=2, n_discrete=1, t_train=200, t_test=120, anomaly_rate=0.1, segment_length=6, warmup=10
    )


@pytest.fixture()
def sine_frame(schema: VariableSchema) -> SeriesFrame:
    t = np.arange(160, dtype=np.float64)
    base = 0.5 + 0.4 * np.sin(2 * np.pi * t / 20)
    values = np.column_stack([base, 1.0 - base, (base > 0.5).astype(float), 0.5 + 0.2 * np.cos(2 * np.pi * t / 20)])
    return SeriesFrame(schema=schema, values=values)


@pytest.fixture()
def log_records():
    records: list[str] = []
    handler = logger.add(lambda message: records.append(message.record["level"].name), level="DEBUG")
    yield records
    logger.remove(handler)


@pytest.fixture()
def restore_logger():
    yield
    logger.remove()
    logger.add(sys.stderr, level="DEBUG")
