import pytest

_REPORT: list[str] = []


@pytest.fixture
def record():
    """Log one acceptance line: ``record(name, passed, detail)``."""
    def _record(name: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name:<34} {detail}"
        _REPORT.append(line)
        print(line)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
