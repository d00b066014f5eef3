import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test still asserts on its own."""
    lines = request.config.stash[_LINES]

    def record(number: int, ok: bool, detail: str) -> bool:
        lines.append((number, "PASS" if ok else "FAIL", detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash[_LINES]
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
