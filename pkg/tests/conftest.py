import numpy as np
import pytest

from binacue.dataset import SphericalHeadSpec, synth_spherical

FS = 44100


@pytest.fixture(scope="session")
def head():
    return SphericalHeadSpec()


@pytest.fixture(scope="session")
def sphere(head):
    """Pure-ITD spherical fixture on a 15 degree grid covering both hemispheres."""
    return synth_spherical(head, np.arange(-90, 91, 15))


@pytest.fixture(scope="session")
def sphere_front(head):
    return synth_spherical(head, np.arange(0, 91, 15))


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
