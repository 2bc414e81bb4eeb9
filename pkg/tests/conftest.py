import pytest
import torch

from apc.config import ModelConfig, TrainConfig
from apc.synthgen import GenerationConfig, build_dataset
from apc.training import train

ACCEPTANCE_LOG: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)


def micro_model_config(**overrides):
    """Smallest config that exercises every code path."""
    defaults = dict(
        n_points=64,
        channels=(8, 12, 16),
        code_dim=6,
        feature_dim=32,
        image_resolution=32,
        image_channels=(4, 8, 8, 16),
        knn_k=4,
        partial_points=64,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Tiny shared dataset: 24 train / 8 val / 8 test at 32x32."""
    out = tmp_path_factory.mktemp("microdata")
    config = GenerationConfig(
        out_dir=str(out), train=24, val=8, test=8, seed=5, resolution=32, dense_points=256
    )
    return build_dataset(config)


@pytest.fixture(scope="session")
def micro_trained(micro_dataset):
    """A briefly trained full model on the micro dataset (shared, read-only)."""
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    tc = TrainConfig(epochs=3, batch_size=8, lr=2e-3, seed=0, code_dim=6)
    model, history = train(micro_dataset, micro_model_config(), tc)
    return model, history, tc
