import numpy as np
import pytest
import torch

from aggseg.model import ArchConfig, build_model
from aggseg.trainer import initialize_weights

SMALL_DEPTHS = (4, 8, 8, 16, 16)


@pytest.fixture
def small_config():
    return ArchConfig(input_size=32, block_depths=SMALL_DEPTHS)


@pytest.fixture
def small_model(small_config):
    model = build_model(small_config)
    initialize_weights(model, seed=0)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def images(rng):
    return torch.tensor(rng.random((2, 32, 32, 3)), dtype=torch.float32)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
