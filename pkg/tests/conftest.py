import numpy as np
import pytest

from tslora.model import ModelConfig, build_model

# acceptance results, echoed after the run so they survive output capture
CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)


SMALL = ModelConfig(d_model=8, n_heads=2, n_layers=2, d_ff=16, context_length=12, horizon=6)


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture
def small_model():
    return build_model(SMALL, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturb(model, seed=99, scale=0.3):
    """Push weights away from the tiny init so outputs depend visibly on inputs."""
    r = np.random.default_rng(seed)
    for name, p in model.params.items():
        if not name.endswith((".gamma", ".beta")):
            p += r.normal(0.0, scale, size=p.shape)
    return model
