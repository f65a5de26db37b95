import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome, print it and fail if it did not hold."""

    def record(number: int, summary: str, ok: bool, detail: str = ""):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {summary}" + (f" ({detail})" if detail else "")
        VERDICTS[number] = (ok, line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n][1])
