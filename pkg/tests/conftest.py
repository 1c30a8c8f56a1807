import pytest

from helpers import random_instance, small_dataset


@pytest.fixture
def toy():
    return small_dataset(0)


@pytest.fixture
def instance():
    return random_instance(3)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, description, detail = ACCEPTANCE_RESULTS[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {description}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
