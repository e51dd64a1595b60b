import pytest

# acceptance verdict lines, printed together at the end of the session
VERDICTS: list = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str):
        VERDICTS.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
