from datetime import date

import pytest

from stratus.pipeline import DataContext
from stratus.scenario import ScenarioConfig, generate_scenario

# 24 days spread over 2015-2017 keeps every fold non-empty at low cost
SMALL = ScenarioConfig(n_days=24, day_stride=45, start_date=date(2015, 1, 3))


@pytest.fixture(scope="session")
def small_scenario():
    return generate_scenario(SMALL)


@pytest.fixture(scope="session")
def small_context(small_scenario):
    return DataContext(small_scenario)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
