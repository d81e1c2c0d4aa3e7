import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Print and keep one verdict line per acceptance criterion."""

    def _record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
