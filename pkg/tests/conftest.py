import gc

import numpy as np
import pytest
from hypothesis import settings

from membrane4d.biharmonic import assemble_precision, make_solver
from membrane4d.harness import membrane_solver
from membrane4d.lattice import Lattice4

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="module", autouse=True)
def _release_cached_solvers():
    # cached factorisations (hundreds of MB at N = 8) do not outlive a module
    yield
    membrane_solver.cache_clear()
    gc.collect()


@pytest.fixture(scope="session")
def op4():
    return assemble_precision(Lattice4(4))


@pytest.fixture(scope="session")
def dense4(op4):
    return make_solver(op4, "dense")


@pytest.fixture(scope="session")
def inv4(op4):
    # dense inverse: the Green's function oracle at N = 4
    return np.linalg.inv(op4.to_dense())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # one PASS/FAIL line per acceptance criterion, recorded by test_acceptance
    lines = getattr(config, "acceptance_lines", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
