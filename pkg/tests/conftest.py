import numpy as np
import pytest

from orthopreview.morphable import build_synthetic_model


@pytest.fixture(scope="session")
def model64():
    return build_synthetic_model(0, 64, 16)


@pytest.fixture(scope="session")
def model16():
    return build_synthetic_model(0, 16, 16)


@pytest.fixture(scope="session")
def model8():
    return build_synthetic_model(0, 8, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
