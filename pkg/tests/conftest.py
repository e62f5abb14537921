import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record one pass/fail line per acceptance criterion; echoed live and in the summary."""

    def record(criterion: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
