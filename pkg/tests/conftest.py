import functools
import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from singular_heat.grid import CoefficientSpec, OmegaSpec, build_grid, make_coefficient, make_masks  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def ball(m: int):
    return build_grid(1.0, m, "ball")


@functools.lru_cache(maxsize=None)
def box(m: int):
    return build_grid(1.0, m, "box")


@pytest.fixture(scope="session")
def g12():
    return ball(12)


@pytest.fixture(scope="session")
def g16():
    return ball(16)


@pytest.fixture(scope="session")
def bump16(g16):
    return make_coefficient(g16, CoefficientSpec("bump"))


@pytest.fixture(scope="session")
def masks16(g16):
    return make_masks(g16, OmegaSpec("ball"))


@pytest.fixture(scope="session")
def annulus16(g16):
    return make_masks(g16, OmegaSpec("annulus"), 0.3)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import SCOREBOARD
    except ImportError:
        return
    if not SCOREBOARD:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(SCOREBOARD, key=lambda k: int(k[1:])):
        terminalreporter.write_line(SCOREBOARD[key])
