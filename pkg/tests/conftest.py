import numpy as np
import pytest

from vaeprior.field import CovarianceModel, GridSpec, kle_decompose


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def grid20():
    return GridSpec(100.0, 100.0, 20, 20)


@pytest.fixture(scope="session")
def basis20(grid20):
    return kle_decompose(grid20, CovarianceModel.isotropic(20.0))


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(100.0, 100.0, 10, 10)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
