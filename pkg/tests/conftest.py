import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(id, text, ok)`` then assert on ``ok``."""

    def record(cid, text, ok):
        _ACCEPTANCE.append((cid, text, bool(ok)))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, text, ok in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{cid:<2} {text}")
