import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from vninet.model import ModelConfig, init_params

torch.set_num_threads(1)

settings.register_profile(
    "vninet", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("vninet")

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TOY = ModelConfig(c_equi=4, mlp_dims=(8, 16), desc_dim=8, k_edgeconv=4, k_ri=4)
SMALL = ModelConfig(c_equi=8, mlp_dims=(16, 32), desc_dim=16, k_edgeconv=6, k_ri=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return init_params(TOY, seed=3)


@pytest.fixture
def small_model():
    return init_params(SMALL, seed=5)
