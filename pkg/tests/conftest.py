import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("fsc", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("fsc")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
