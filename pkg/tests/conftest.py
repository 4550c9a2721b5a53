import numpy as np
import pytest

from regionot.core import FeatureSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def line(m, c, data):
    """A 1 x m feature set from an (m, c) array."""
    return FeatureSet(1, m, c, np.asarray(data, dtype=np.float64).reshape(m, c))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; the lines are echoed after the run."""

    def record(number: int, ok: bool, detail: str) -> None:
        text = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
        ACCEPTANCE_LINES.append(text)
        print(text)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in sorted(ACCEPTANCE_LINES, key=lambda t: int(t.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(text)
