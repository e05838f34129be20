import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary."""
    def record(number: int, title: str, ok: bool, detail: str):
        _VERDICTS.append(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
