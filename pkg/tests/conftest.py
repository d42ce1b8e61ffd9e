import numpy as np
import pytest

from lymphstage import phantom
from lymphstage.atlas import build_atlas, load_default_rules
from lymphstage.volume import Grid3


@pytest.fixture(scope="session")
def default_rules():
    return load_default_rules()


@pytest.fixture(scope="session")
def base_phantom():
    return phantom.generate(phantom.PhantomSpec(seed=11, name="base"))


@pytest.fixture(scope="session")
def base_atlas(base_phantom, default_rules):
    return build_atlas(default_rules, [base_phantom.organs, base_phantom.body], base_phantom.pet.grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return Grid3((12, 10, 8), (2.0, 3.0, 4.0), (-10.0, 5.0, 100.0))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
