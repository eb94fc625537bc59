import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record ``(ok, detail)`` as a PASS/FAIL line, print it, and assert it."""

    def _verdict(label: str, ok: bool, detail: str):
        line = f"{label}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
