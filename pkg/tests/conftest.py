import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; shown again in the terminal summary."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        VERDICTS.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
