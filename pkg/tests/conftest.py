import pytest

_VERDICTS = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion."""
    def record(number, ok, detail):
        _VERDICTS[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
