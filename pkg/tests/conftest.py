import numpy as np
import pytest

from wsmooth.data import PopulationMargins, StratumSummary

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Store a one-line PASS/FAIL verdict, printed in the terminal summary."""

    def _record(label: str, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def two_strata():
    """N=(100,900), n=(50,50), ybar=(0.2,0.4): the worked two-stratum example."""
    return StratumSummary(np.array([50.0, 50.0]), np.array([10.0, 20.0])), PopulationMargins(np.array([100.0, 900.0]))
