import numpy as np
import pytest

from spinmrfm import model
from spinmrfm.config import preset


@pytest.fixture(scope="session")
def desk():
    return preset("desk-small")


@pytest.fixture(scope="session")
def paper():
    return preset("paper-sec7")


@pytest.fixture(scope="session")
def unit_params():
    return model.PhysParams(eta=0.0, epsilon=1.0, gamma_m=0.0, kT=1.0)


def random_density(rng, dim, rank=None):
    rank = rank or dim
    a = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real


def superposition(n):
    psi = np.zeros(2 * n, dtype=complex)
    psi[0] = psi[n] = 1 / np.sqrt(2)
    return psi


# (criterion number, line) pairs filled by the acceptance suite
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
