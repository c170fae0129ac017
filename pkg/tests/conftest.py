import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line pass/fail verdict for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
