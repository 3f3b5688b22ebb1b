from __future__ import annotations

import pytest

_CRITERIA: dict = {}


class CriterionLog:
    def record(self, number: int, passed: bool, message: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {message}"
        _CRITERIA[number] = line
        print(line)


@pytest.fixture(scope="session")
def criterion_log() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter) -> None:
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
