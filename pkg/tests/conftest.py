import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion_report():
    """Record one '[PASS]/[FAIL] criterion N ...' line; all lines are echoed after the run."""

    def record(number, passed, text):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0].split(".")[0])):
            terminalreporter.write_line(line)
