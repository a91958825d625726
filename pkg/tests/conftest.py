import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def flat_plane(shape=(8, 8, 8), z0=4):
    """Mask with foreground at z >= z0 everywhere."""
    m = np.zeros(shape, dtype=np.uint8)
    m[z0:] = 1
    return m


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; ok=None marks a skip."""

    def record(label: str, ok, detail: str = "") -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {label}: {detail}"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
