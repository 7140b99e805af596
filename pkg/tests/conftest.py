import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict():
    """Records one PASS/FAIL line for an acceptance criterion, then asserts it."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
