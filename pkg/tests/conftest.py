import pytest

_criteria_lines: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    return _criteria_lines


def pytest_terminal_summary(terminalreporter):
    if _criteria_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria_lines, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
