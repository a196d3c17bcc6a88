import numpy as np
import pytest

from riskavi.mdp import random_tabular

ORACLE_SEED = 20240


def oracle_instance():
    """The fixed 5-state, 2-action instance shared by oracle tests."""
    return random_tabular(5, 2, 0.6, np.random.default_rng(ORACLE_SEED), support=3)


@pytest.fixture
def tabular5():
    return oracle_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


VERDICTS: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    """Print and keep a one-line verdict for an acceptance criterion."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    print(line)
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
