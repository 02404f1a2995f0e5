import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cimfault import ModelConfig, init_toy_weights  # noqa: E402


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig()


@pytest.fixture(scope="session")
def toy_weights(toy_cfg):
    return init_toy_weights(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n_layers=2, d_model=8, n_heads=2, head_dim=4, d_ffn=16, vocab=32)


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    # larger init so attention is far from uniform
    return init_toy_weights(tiny_cfg, seed=7, std=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
