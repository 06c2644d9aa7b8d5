"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from semvid.channel import make_realization, sample_rayleigh
from semvid.diffusion import build_schedule


# acceptance-criterion verdict lines, echoed after the test summary so they
# survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sched_default():
    """The default linear schedule: T=1000, beta 1e-4 -> 0.02."""
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def channel_for(length: int, sigma2: float, seed: int = 0):
    """A random channel realization of the given frame length."""
    r = np.random.default_rng(seed)
    return make_realization(sample_rayleigh(r, length // 2), sigma2)
