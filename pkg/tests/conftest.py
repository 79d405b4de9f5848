import numpy as np
import pytest
from hypothesis import settings

from rvrs.proposal import MeanFieldNormal
from rvrs.target import AnalyticGaussianTarget

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def mismatch_problem():
    """1-D Normal target N(0.4, 0.8^2) with evidence exp(-0.3) and a wider, shifted proposal."""
    target = AnalyticGaussianTarget.isotropic(-0.3, 0.4, 0.8, 1)
    q = MeanFieldNormal(np.array([0.0]), np.array([np.log(1.3)]))
    return target, q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
