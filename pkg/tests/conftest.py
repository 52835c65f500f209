import numpy as np
import pytest

from mvcl.pipeline import SyntheticSpec, generate_synthetic
from mvcl.textbank import build_anchors, default_prompt_bank

ACCEPTANCE_LINES = []


def record_acceptance(line):
    """Keep an acceptance verdict so it is echoed in the terminal summary."""
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def easy_dataset():
    return generate_synthetic(SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def anchors():
    return build_anchors(default_prompt_bank(), 32, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
