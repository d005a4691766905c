import pytest

_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict, printed in the terminal summary."""
    def _report(criterion: int, ok: bool, detail: str):
        _LINES.append(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
