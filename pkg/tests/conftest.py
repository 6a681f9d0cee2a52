import pytest

from rtbridge.runtime import Runtime


@pytest.fixture
def rt():
    return Runtime(capacity=1 << 22, demo=True)


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
