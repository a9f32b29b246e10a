import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""
    def record(number, ok, detail):
        _LINES.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
