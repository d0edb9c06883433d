import pytest

_REPORT: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(label, passed, detail)``."""

    def record(label, passed, detail=""):
        _REPORT.append((label, bool(passed), detail))
        print(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in _REPORT:
        terminalreporter.write_line(f"{label:<28} {'PASS' if passed else 'FAIL'}  {detail}")
