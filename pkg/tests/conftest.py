import pytest

_RESULTS = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints a PASS/FAIL line and asserts ``ok``."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS.append((n, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(line)
