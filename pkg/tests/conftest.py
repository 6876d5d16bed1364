import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, name, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(n, name, ok, detail=""):
        line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
