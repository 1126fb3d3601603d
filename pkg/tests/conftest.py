import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""

    def _record(number: int, name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {name}  ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
