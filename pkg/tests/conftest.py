import numpy as np
import pytest

from cef.grid import ConditioningWindow, make_grid_spec
from cef.harness.systems import ToySystemSpec, build_system


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grid():
    return make_grid_spec(4, 8)


@pytest.fixture(scope="session")
def linear_gauss():
    spec = ToySystemSpec(height=4, width=8, corr_length_y=1.0, diffusivity_y=0.02)
    return build_system(spec)


@pytest.fixture
def lg_window(linear_gauss, small_grid):
    x = linear_gauss.simulate(8, np.random.default_rng(7))
    return ConditioningWindow.from_array(small_grid, x[[8, 2]], (0.0, -6.0), 0.0)


@pytest.fixture
def lg_backend(linear_gauss, small_grid):
    return linear_gauss.analytic_backend(small_grid, 2, 240.0)


# -- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


class CriterionRecorder:
    def __init__(self, store: dict, number: int):
        self.store = store
        self.number = number

    def check(self, ok: bool, detail: str) -> bool:
        self.store[self.number] = f"criterion {self.number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for ``test_criterion_NN_*`` tests."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})
    number = int(request.node.name.split("_")[2])
    rec = CriterionRecorder(store, number)
    yield rec
    store.setdefault(number, f"criterion {number:>2}: FAIL  (raised before its check completed)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
