import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("neumat", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("neumat")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line[1])
