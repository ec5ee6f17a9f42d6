import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from mbse3.geom import icosahedral_group  # noqa: E402


@pytest.fixture(scope="session")
def G():
    return icosahedral_group()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}")
