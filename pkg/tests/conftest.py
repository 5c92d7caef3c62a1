import pytest

_LINES = {}


@pytest.fixture
def record():
    """``record(criterion, passed, detail)`` adds a line to the acceptance summary."""

    def _record(criterion: int, passed: bool, detail: str = "") -> None:
        _LINES[criterion] = f"ACCEPTANCE {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        print(_LINES[criterion])

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_LINES):
            terminalreporter.write_line(_LINES[k])
