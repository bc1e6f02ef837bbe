import numpy as np
import pytest

from roverplan.terrain import TerrainMap


def grid_from_function(fn, origin=(0.0, 0.0), cell=0.5, n=25, **kwargs):
    """Sample h = fn(x, y) on a regular grid and wrap it in a TerrainMap."""
    xs = origin[0] + cell * np.arange(n)
    ys = origin[1] + cell * np.arange(n)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    return TerrainMap(origin, cell, fn(X, Y), **kwargs)


@pytest.fixture
def flat_map():
    return grid_from_function(lambda x, y: np.zeros_like(x))


@pytest.fixture
def plane_02x_map():
    return grid_from_function(lambda x, y: 0.2 * x)


@pytest.fixture
def rough_map():
    """Seeded smooth random terrain for finite-difference spot checks."""
    rng = np.random.default_rng(7)
    n, cell = 25, 0.5
    coarse = rng.normal(scale=0.6, size=(6, 6))
    from scipy.interpolate import RectBivariateSpline

    cx = np.linspace(0, (n - 1) * cell, 6)
    sp = RectBivariateSpline(cx, cx, coarse, kx=3, ky=3, s=0)
    xs = cell * np.arange(n)
    return TerrainMap((0.0, 0.0), cell, sp(xs, xs, grid=True).T)
