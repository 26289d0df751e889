import pytest

_RESULTS = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(criterion, passed, detail)``."""

    def record(criterion, passed, detail):
        line = f"ACCEPTANCE {criterion:>2} {'PASS' if passed else 'FAIL'}  {detail}"
        _RESULTS.append((criterion, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(line)
