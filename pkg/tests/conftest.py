import math

import numpy as np
import pytest

from ewlab.config import make_config
from ewlab.grid_spectral import Grid3
from ewlab.material import MaterialSpec

TWO_PI = 2.0 * math.pi


@pytest.fixture(scope="session")
def grid16():
    return Grid3(16, TWO_PI)


@pytest.fixture(scope="session")
def grid32():
    return Grid3(32, TWO_PI)


@pytest.fixture(scope="session")
def spec():
    return MaterialSpec()


@pytest.fixture(scope="session")
def small_traj():
    """Short nonlinear run on a 16^3 grid, shared by the geometry and CLI tests."""
    from ewlab.evolve import simulate

    return simulate(make_config(grid={"n": 16}, time={"t_end": 0.5, "cfl_safety": 0.1}, seed=1))


def max_abs(a):
    return float(np.max(np.abs(a)))
