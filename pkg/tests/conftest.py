import numpy as np
import pytest

from biphoton.params import CrystalPumpParams, GridSpec
from biphoton.spdc import amplitude_grid, default_grid


@pytest.fixture(scope="session")
def default_params():
    return CrystalPumpParams()


@pytest.fixture(scope="session")
def full_grid(default_params):
    return default_grid(default_params)


@pytest.fixture(scope="session")
def full_amplitude(default_params, full_grid):
    return amplitude_grid(default_params, full_grid)


@pytest.fixture(scope="session")
def small_grid(default_params):
    # 8 x 6 bins per arm, 4x coarser steps, still centred on the ring
    return default_grid(default_params, n_k=8, n_lambda=6, k_step=4 * 5.95, lambda_step=4 * 0.127)


@pytest.fixture(scope="session")
def small_amplitude(default_params, small_grid):
    return amplitude_grid(default_params, small_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary and return ``ok``."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
