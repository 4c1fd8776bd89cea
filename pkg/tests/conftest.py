import numpy as np
import pytest

from dconrec.data import InteractionSet
from dconrec.synthetic import planted_blocks


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def planted():
    return planted_blocks(n_users=60, n_items=30, n_interactions=900, seed=3)


def pairs_set(data: InteractionSet) -> set:
    return set(zip(data.users.tolist(), data.items.tolist()))


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts collected by test_acceptance, one line each."""
    import sys

    lines = []
    for name, module in list(sys.modules.items()):
        if name.endswith("test_acceptance"):
            lines = getattr(module, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
