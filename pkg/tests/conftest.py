import json
import math
from pathlib import Path

import numpy as np
import pytest

from akcy.forms import perturbed_triple, standard_triple
from akcy.grid import GridSpec

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())


@pytest.fixture(scope="session")
def oracle():
    return FROZEN


@pytest.fixture(scope="session")
def grid8():
    return GridSpec.cube(8)


@pytest.fixture(scope="session")
def grid16():
    return GridSpec.cube(16)


@pytest.fixture(scope="session")
def flat8(grid8):
    return standard_triple(grid8)


@pytest.fixture(scope="session")
def flat16(grid16):
    return standard_triple(grid16)


@pytest.fixture(scope="session")
def bumpy8(grid8):
    """Non-integrable J (amplitude 0.1, seed 1) compatible with the standard omega."""
    return perturbed_triple(grid8, 0.1, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def x0(grid):
    return grid.mesh()[0]


TWO_PI = 2 * math.pi


# acceptance criterion -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def accept():
    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
