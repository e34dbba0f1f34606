import numpy as np
import pytest

from mindcraft import numcore as nc
from mindcraft.gridworld import SceneConfig, generate_scene
from mindcraft import querygen


def P(a, name=None):
    """float64 parameter from array-like."""
    return nc.Parameter(np.asarray(a, dtype=np.float64), name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenes():
    return [generate_scene(s) for s in range(12)]


@pytest.fixture(scope="session")
def episodes(scenes):
    return querygen.generate_dataset(scenes, 24, budget=6, seed=5)


@pytest.fixture(scope="session")
def small_scene_cfg():
    return SceneConfig(width=8, height=8, n_rooms=2, min_room_size=3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
