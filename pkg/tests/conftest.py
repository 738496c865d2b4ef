"""Collects acceptance verdicts and prints one line per criterion at the end."""

import pytest

_VERDICTS: dict[int, list[tuple[bool, str]]] = {}


class Verdicts:
    def record(self, criterion: int, passed: bool, detail: str) -> bool:
        _VERDICTS.setdefault(criterion, []).append((bool(passed), detail))
        return bool(passed)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        parts = _VERDICTS[n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  " + "; ".join(d for _, d in parts))
