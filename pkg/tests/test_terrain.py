import math

import numpy as np
import pytest

from roverplan.errors import TerrainBoundsError, TerrainFormatError
from roverplan.terrain import TerrainMap, load_heightmap, write_csv_grid, write_esri_ascii

from conftest import grid_from_function

ATAN_02 = 0.19739555984988078  # atan(0.2), frozen from direct evaluation


# -- construction and file I/O ------------------------------------------------


def test_flat_grid_height(flat_map):
    assert flat_map.height_at(1.5, 1.5) == pytest.approx(0.0, abs=1e-12)


def test_minimum_grid_size():
    with pytest.raises(TerrainFormatError):
        TerrainMap((0, 0), 1.0, np.zeros((3, 5)))
    TerrainMap((0, 0), 1.0, np.zeros((4, 4)))  # smallest legal grid


def test_non_finite_cell_rejected():
    grid = np.zeros((5, 5))
    grid[2, 3] = np.nan
    with pytest.raises(TerrainFormatError, match="non-finite"):
        TerrainMap((0, 0), 1.0, grid)


def test_esri_roundtrip(tmp_path, rough_map):
    path = tmp_path / "map.asc"
    write_esri_ascii(rough_map, path)
    loaded = load_heightmap(path, format="esri_ascii_grid")
    assert np.array_equal(loaded.heights, rough_map.heights)
    assert loaded.cell_size == rough_map.cell_size
    assert np.array_equal(loaded.origin, rough_map.origin)


def test_esri_row_length_error(tmp_path):
    path = tmp_path / "bad.asc"
    path.write_text(
        "ncols 4\nnrows 4\nxllcorner 0\nyllcorner 0\ncellsize 1.0\nNODATA_value -9999\n"
        "0 0 0 0\n0 0 0\n0 0 0 0\n0 0 0 0\n"
    )
    with pytest.raises(TerrainFormatError, match="row 2"):
        load_heightmap(path)


def test_esri_nodata_rejected(tmp_path):
    path = tmp_path / "nodata.asc"
    path.write_text(
        "ncols 4\nnrows 4\nxllcorner 0\nyllcorner 0\ncellsize 1.0\nNODATA_value -9999\n"
        "0 0 0 0\n0 -9999 0 0\n0 0 0 0\n0 0 0 0\n"
    )
    with pytest.raises(TerrainFormatError, match="NODATA"):
        load_heightmap(path)


def test_esri_north_to_south_orientation(tmp_path):
    # Single raised cell in the first data row -> northernmost row (max y).
    path = tmp_path / "oriented.asc"
    path.write_text(
        "ncols 4\nnrows 4\nxllcorner 0\nyllcorner 0\ncellsize 1.0\nNODATA_value -9999\n"
        "0 5 0 0\n0 0 0 0\n0 0 0 0\n0 0 0 0\n"
    )
    m = load_heightmap(path)
    assert m.heights[3, 1] == 5.0  # row index grows with y
    assert m.height_at(1.0, 3.0) == pytest.approx(5.0, abs=1e-9)


def test_csv_roundtrip(tmp_path, rough_map):
    path = tmp_path / "map.csv"
    write_csv_grid(rough_map, path)
    loaded = load_heightmap(path, format="csv_grid")
    assert np.array_equal(loaded.heights, rough_map.heights)
    assert np.array_equal(loaded.origin, rough_map.origin)


def test_csv_bad_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,0,1.0\n0,0,0,0\n0,0,0\n0,0,0,0\n0,0,0,0\n")
    with pytest.raises(TerrainFormatError, match="row 2"):
        load_heightmap(path, format="csv_grid")


def test_unknown_format(tmp_path):
    path = tmp_path / "x.bin"
    path.write_text("junk")
    with pytest.raises(TerrainFormatError, match="unknown"):
        load_heightmap(path, format="geotiff")


def test_node_interpolation(rough_map):
    ix, iy = 7, 11
    x = rough_map.origin[0] + ix * rough_map.cell_size
    y = rough_map.origin[1] + iy * rough_map.cell_size
    assert rough_map.height_at(x, y) == pytest.approx(rough_map.heights[iy, ix], abs=1e-9)


def test_out_of_bounds_rejected(flat_map):
    with pytest.raises(TerrainBoundsError):
        flat_map.height_at(-0.1, 1.0)
    with pytest.raises(TerrainBoundsError):
        flat_map.query(1.0, 1e6)
    with pytest.raises(TerrainBoundsError):
        flat_map.pitch_along_heading(13.0, 1.0, 0.0)


# -- affine reproduction -------------------------------------------------------


def test_affine_height_and_gradient():
    m = grid_from_function(lambda x, y: 0.1 * x)
    rng = np.random.default_rng(0)
    lo, hi = 0.3, 11.7
    for _ in range(25):
        x, y = rng.uniform(lo, hi, 2)
        q = m.query(x, y)
        assert q.height == pytest.approx(0.1 * x, abs=1e-6)
        assert q.gradient == pytest.approx([0.1, 0.0], abs=1e-6)


def test_affine_pitch_attitude():
    m = grid_from_function(lambda x, y: 0.3 * x + 0.4 * y)
    rng = np.random.default_rng(1)
    for _ in range(25):
        x, y = rng.uniform(0.3, 11.7, 2)
        psi = rng.uniform(-np.pi, np.pi)
        phi, _ = m.pitch_along_heading(x, y, psi)
        assert phi == pytest.approx(
            math.atan(0.3 * math.cos(psi) + 0.4 * math.sin(psi)), abs=1e-6
        )
        xi, _ = m.attitude_angle(x, y)
        assert math.cos(xi) == pytest.approx(0.8944271909999159, abs=1e-6)


# -- pitch along heading --------------------------------------------------------


def test_pitch_flat(flat_map):
    for psi in (0.0, 1.0, -2.5):
        phi, dphi = flat_map.pitch_along_heading(3.0, 3.0, psi)
        assert phi == pytest.approx(0.0, abs=1e-9)
        assert dphi == pytest.approx(np.zeros(3), abs=1e-9)


def test_pitch_up_slope(plane_02x_map):
    phi, _ = plane_02x_map.pitch_along_heading(5.0, 5.0, 0.0)
    assert phi == pytest.approx(ATAN_02, abs=1e-9)


def test_pitch_across_slope(plane_02x_map):
    phi, _ = plane_02x_map.pitch_along_heading(5.0, 5.0, math.pi / 2)
    assert phi == pytest.approx(0.0, abs=1e-9)


def test_pitch_heading_reversal(rough_map):
    rng = np.random.default_rng(3)
    for _ in range(50):
        x, y = rng.uniform(0.5, 11.5, 2)
        psi = rng.uniform(-np.pi, np.pi)
        fwd, _ = rough_map.pitch_along_heading(x, y, psi)
        back, _ = rough_map.pitch_along_heading(x, y, psi + np.pi)
        assert fwd == pytest.approx(-back, abs=1e-12)


# -- attitude angle -------------------------------------------------------------


def test_attitude_flat(flat_map):
    xi, dxi = flat_map.attitude_angle(2.0, 2.0)
    assert xi == pytest.approx(0.0, abs=1e-9)
    assert dxi == pytest.approx(np.zeros(2), abs=1e-9)


def test_attitude_slope(plane_02x_map):
    xi, _ = plane_02x_map.attitude_angle(5.0, 5.0)
    assert xi == pytest.approx(ATAN_02, abs=1e-7)


def test_angle_ranges(rough_map):
    rng = np.random.default_rng(4)
    for _ in range(100):
        x, y = rng.uniform(0.2, 11.8, 2)
        psi = rng.uniform(-np.pi, np.pi)
        phi, _ = rough_map.pitch_along_heading(x, y, psi)
        xi, _ = rough_map.attitude_angle(x, y)
        assert -np.pi / 2 < phi < np.pi / 2
        assert 0.0 < math.cos(xi) <= 1.0
        assert 0.0 <= xi < np.pi / 2


# -- risk density ---------------------------------------------------------------


def test_risk_flat(flat_map):
    r, dr = flat_map.risk_density(3.0, 3.0)
    assert r == pytest.approx(0.0, abs=1e-9)
    assert dr == pytest.approx(np.zeros(2), abs=1e-9)


def test_risk_slope_no_curvature(plane_02x_map):
    r, _ = plane_02x_map.risk_density(5.0, 5.0, curvature_weight=0.0)
    assert r == pytest.approx(0.04, abs=1e-7)


def test_risk_quadratic_bowl():
    m = grid_from_function(lambda x, y: 0.05 * ((x - 6.0) ** 2 + (y - 6.0) ** 2))
    r, _ = m.risk_density(6.0, 6.0, curvature_weight=1.0)
    # at the bowl centre the gradient vanishes; r = |H|_F^2 = 2 * 0.1^2
    assert r == pytest.approx(0.02, abs=1e-7)


def test_risk_nonnegative(rough_map):
    rng = np.random.default_rng(5)
    for _ in range(50):
        x, y = rng.uniform(0.3, 11.7, 2)
        r, _ = rough_map.risk_density(x, y)
        assert r >= 0.0


# -- gradient oracles (central finite differences) --------------------------------


def _fd2(f, x, y, step):
    return (
        (f(x + step, y) - f(x - step, y)) / (2 * step),
        (f(x, y + step) - f(x, y - step)) / (2 * step),
    )


def _rel_err(analytic, fd):
    denom = max(abs(fd), 1e-6)
    return abs(analytic - fd) / denom


def test_pitch_gradient_matches_fd(rough_map):
    rng = np.random.default_rng(11)
    hx = 1e-5
    hpsi = 1e-6
    for _ in range(100):
        x, y = rng.uniform(0.5, 11.5, 2)
        psi = rng.uniform(-np.pi, np.pi)
        _, dphi = rough_map.pitch_along_heading(x, y, psi)
        fdx, fdy = _fd2(lambda a, b: rough_map.pitch_along_heading(a, b, psi)[0], x, y, hx)
        fdpsi = (
            rough_map.pitch_along_heading(x, y, psi + hpsi)[0]
            - rough_map.pitch_along_heading(x, y, psi - hpsi)[0]
        ) / (2 * hpsi)
        assert _rel_err(dphi[0], fdx) <= 1e-4
        assert _rel_err(dphi[1], fdy) <= 1e-4
        assert _rel_err(dphi[2], fdpsi) <= 1e-4


def test_attitude_gradient_matches_fd(rough_map):
    rng = np.random.default_rng(12)
    for _ in range(100):
        x, y = rng.uniform(0.5, 11.5, 2)
        _, dxi = rough_map.attitude_angle(x, y)
        fdx, fdy = _fd2(lambda a, b: rough_map.attitude_angle(a, b)[0], x, y, 1e-5)
        assert _rel_err(dxi[0], fdx) <= 1e-4
        assert _rel_err(dxi[1], fdy) <= 1e-4


def test_risk_gradient_matches_fd(rough_map):
    # mid-cell points: the curvature part of the gradient jumps at knot lines
    rng = np.random.default_rng(13)
    cell = rough_map.cell_size
    for _ in range(50):
        ix, iy = rng.integers(1, 22, 2)
        x = (ix + 0.5) * cell
        y = (iy + 0.5) * cell
        _, dr = rough_map.risk_density(x, y)
        fdx, fdy = _fd2(lambda a, b: rough_map.risk_density(a, b)[0], x, y, 1e-6)
        assert _rel_err(dr[0], fdx) <= 1e-4
        assert _rel_err(dr[1], fdy) <= 1e-4


# -- normals ---------------------------------------------------------------------


def test_normal_unit_and_consistent(rough_map):
    rng = np.random.default_rng(14)
    for _ in range(50):
        x, y = rng.uniform(0.3, 11.7, 2)
        q = rough_map.query(x, y)
        assert np.linalg.norm(q.normal) == pytest.approx(1.0, abs=1e-12)
        g = np.linalg.norm(q.gradient)
        assert q.normal[2] == pytest.approx(1.0 / math.sqrt(1.0 + g * g), abs=1e-12)


def test_batch_queries_match_scalar(rough_map):
    rng = np.random.default_rng(15)
    xs = rng.uniform(0.5, 11.5, 8)
    ys = rng.uniform(0.5, 11.5, 8)
    psis = rng.uniform(-np.pi, np.pi, 8)
    phi_b, dphi_b = rough_map.pitch_along_heading(xs, ys, psis)
    xi_b, dxi_b = rough_map.attitude_angle(xs, ys)
    for i in range(8):
        phi_s, dphi_s = rough_map.pitch_along_heading(xs[i], ys[i], psis[i])
        xi_s, dxi_s = rough_map.attitude_angle(xs[i], ys[i])
        assert phi_b[i] == pytest.approx(phi_s, abs=1e-15)
        assert dphi_b[:, i] == pytest.approx(dphi_s, abs=1e-15)
        assert xi_b[i] == pytest.approx(xi_s, abs=1e-15)
        assert dxi_b[:, i] == pytest.approx(dxi_s, abs=1e-15)
