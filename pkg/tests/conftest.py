import pytest

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion for the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
