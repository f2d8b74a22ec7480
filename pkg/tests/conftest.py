import numpy as np
import pytest

from lifespan_gamm import sim
from lifespan_gamm.model import canonical_spec, fit_model


def simulated(curve="hippocampus", regime="offset", n=200, seed=11, **protocol):
    truth = sim.builtin_truths()[curve, regime]
    proto = sim.SamplingProtocol(n_participants=n, **protocol)
    return truth, sim.sample_dataset(truth, proto, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def offset_data():
    return simulated()[1]


@pytest.fixture(scope="session")
def fitted_3a(offset_data):
    return fit_model(canonical_spec("3a"), offset_data)


@pytest.fixture(scope="session")
def fitted_1b(offset_data):
    return fit_model(canonical_spec("1b"), offset_data)


#: criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
