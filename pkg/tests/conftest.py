from __future__ import annotations

import pytest

CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log() -> list[str]:
    """Collects acceptance lines for the terminal summary."""
    return CRITERION_LINES


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERION_LINES, key=lambda s: int(s.split("criterion")[1].split()[0])):
        terminalreporter.write_line(line)
