import numpy as np
import pytest

from zkslim import zoo
from zkslim.model import calibrate, quantize, quantize_input


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_q():
    """A calibrated 4-6-3 ReLU net at scale 2^8 plus its integer calibration inputs."""
    fm = zoo.mlp([4, 6, 3], seed=3)
    X = quantize_input(zoo.gaussian_inputs(30, 4, seed=4), 8)
    return calibrate(quantize(fm, 8), X), X


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
