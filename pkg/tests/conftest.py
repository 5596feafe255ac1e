import numpy as np
import pytest

from hypocert.model import ModelSpec, PerturbedHarmonic, TrigPerturbation, ZeroPerturbation
from hypocert import pde


def harmonic(gamma=1.0, sigma=1.0, delta=0.0, d=1):
    pert = ZeroPerturbation() if delta == 0 else TrigPerturbation(delta, (1.0,) * (2 * d))
    return ModelSpec(d, sigma, PerturbedHarmonic(gamma, pert))


@pytest.fixture(scope="session")
def eq_model():
    return harmonic()


@pytest.fixture(scope="session")
def neq_model():
    return harmonic(delta=0.3)


@pytest.fixture(scope="session")
def small_eq():
    """64x64 equilibrium grid, generator and steady state."""
    model = harmonic()
    grid = pde.PhaseGrid.centered(6.0, 6.0, 64, 64)
    gen = pde.assemble_generator(model, grid)
    return model, grid, gen, pde.steady_state(gen)


@pytest.fixture(scope="session")
def small_neq():
    model = harmonic(delta=0.3)
    grid = pde.PhaseGrid.default_for(model, 64, 64)
    gen = pde.assemble_generator(model, grid)
    return model, grid, gen, pde.steady_state(gen)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
