import pytest

_RESULTS = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def _record(number, ok, detail):
        _RESULTS.append((number, "PASS" if ok else "FAIL", detail))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(_RESULTS):
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
