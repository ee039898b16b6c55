import numpy as np
import pytest

from slutsky_forge.families import make_family
from slutsky_forge.rotation import RotationCorrection, SlutskyTarget
from slutsky_forge.transport import CompositeFlow


@pytest.fixture(scope="session")
def cd0():
    return make_family("cd0")


@pytest.fixture(scope="session")
def tilt():
    return make_family("tilt")


@pytest.fixture(scope="session")
def cd0_flow(cd0):
    return CompositeFlow(cd0)


@pytest.fixture(scope="session")
def tilt_flow(tilt):
    return CompositeFlow(tilt)


@pytest.fixture(scope="session")
def cd0_rotated(cd0_flow):
    return cd0_flow.with_correction(RotationCorrection(SlutskyTarget.constant(0.05)))


@pytest.fixture(scope="session")
def tilt_rotated(tilt_flow):
    return tilt_flow.with_correction(RotationCorrection(SlutskyTarget.constant(0.02)))


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} | {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
