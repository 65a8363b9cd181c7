import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from creste import DgpSpec, simulate_sample

# derandomized so the whole suite is reproducible run to run
settings.register_profile(
    "repro", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repro")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_sample():
    """One n=400 draw of the continuous-covariate design."""
    return simulate_sample(DgpSpec(n=400, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
