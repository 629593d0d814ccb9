import numpy as np
import pytest
from hypothesis import settings

from tpckit.data import build_dataset, generate_cohort

settings.register_profile("tpckit", deadline=None, max_examples=40)
settings.load_profile("tpckit")


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(3, 60)


@pytest.fixture(scope="session")
def small_dataset(small_cohort):
    return build_dataset(small_cohort, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
