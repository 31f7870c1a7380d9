import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from streamkf.stream import OkfemConfig, init_model  # noqa: E402

SMALL_SHAPE = (3, 16, 16)


@pytest.fixture
def small_config():
    return OkfemConfig(input_shape=SMALL_SHAPE)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
