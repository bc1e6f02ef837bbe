"""Gridded heightfield terrain with smooth interpolation and differentiable queries.

The map is a regular grid of elevation samples interpolated with a bicubic
spline (C2 in the interior), so slope-derived quantities such as the pitch
angle along a heading and the attitude angle have continuous spatial
gradients.  All queries outside the grid are rejected, never extrapolated.

Grid conventions
----------------
``heights[iy, ix]`` is the elevation at ``(origin[0] + ix * cell_size,
origin[1] + iy * cell_size)``; row index grows with y (northward).

File formats:

* ESRI-ASCII-style grid: header lines ``ncols``, ``nrows``, ``xllcorner``,
  ``yllcorner``, ``cellsize``, ``NODATA_value``, then ``nrows`` rows of
  ``ncols`` whitespace-separated samples ordered north to south (first data
  row is the northernmost).  ``xllcorner``/``yllcorner`` name the lower-left
  sample position (node registration).  NODATA cells are rejected.
* CSV grid: first line ``origin_x,origin_y,cell_size``, then one CSV row per
  grid row ordered south to north (row i sits at ``origin_y + i * cell_size``).

TerrainMap instances are immutable after construction and safe for
concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import TerrainBoundsError, TerrainFormatError

__all__ = [
    "TerrainMap",
    "TerrainQuery",
    "load_heightmap",
    "write_esri_ascii",
    "write_csv_grid",
]

MIN_GRID_SIZE = 4  # bicubic support


@dataclass(frozen=True)
class TerrainQuery:
    """Height and differential geometry of the surface at one point.

    ``gradient`` is (dh/dx, dh/dy); ``hessian`` the symmetric 2x2 second
    derivative matrix; ``normal`` the unit upward surface normal.
    """

    height: float
    gradient: np.ndarray
    hessian: np.ndarray
    normal: np.ndarray


class TerrainMap:
    """Immutable interpolated heightfield over a regular grid."""

    def __init__(self, origin, cell_size, heights, risk_curvature_weight=0.1):
        heights = np.asarray(heights, dtype=float)
        if heights.ndim != 2:
            raise TerrainFormatError("heights must be a 2-D grid")
        nrows, ncols = heights.shape
        if nrows < MIN_GRID_SIZE or ncols < MIN_GRID_SIZE:
            raise TerrainFormatError(
                f"grid {nrows}x{ncols} too small; need at least "
                f"{MIN_GRID_SIZE}x{MIN_GRID_SIZE} for bicubic interpolation"
            )
        if not np.isfinite(heights).all():
            bad = np.argwhere(~np.isfinite(heights))[0]
            raise TerrainFormatError(
                f"non-finite height at row {bad[0]}, column {bad[1]}"
            )
        cell_size = float(cell_size)
        if cell_size <= 0.0:
            raise TerrainFormatError("cell_size must be positive")
        if risk_curvature_weight < 0.0:
            raise ValueError("risk_curvature_weight must be >= 0")

        self._origin = np.array(origin, dtype=float).reshape(2)
        self._cell = cell_size
        self._heights = heights.copy()
        self._heights.setflags(write=False)
        self.risk_curvature_weight = float(risk_curvature_weight)

        xs = self._origin[0] + cell_size * np.arange(ncols)
        ys = self._origin[1] + cell_size * np.arange(nrows)
        self._xs = xs
        self._ys = ys
        # RectBivariateSpline wants z[i, j] = f(x[i], y[j]).
        self._spline = RectBivariateSpline(xs, ys, heights.T, kx=3, ky=3, s=0)
        self._d21 = self._spline.partial_derivative(2, 1)
        self._d12 = self._spline.partial_derivative(1, 2)
        self._d20 = self._spline.partial_derivative(2, 0)
        self._d02 = self._spline.partial_derivative(0, 2)

    # -- basic geometry ----------------------------------------------------

    @property
    def origin(self):
        return self._origin.copy()

    @property
    def cell_size(self):
        return self._cell

    @property
    def width(self):
        """Number of grid columns (x samples)."""
        return self._heights.shape[1]

    @property
    def height(self):
        """Number of grid rows (y samples)."""
        return self._heights.shape[0]

    @property
    def heights(self):
        return self._heights

    @property
    def x_bounds(self):
        return self._xs[0], self._xs[-1]

    @property
    def y_bounds(self):
        return self._ys[0], self._ys[-1]

    def contains(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return (
            (x >= self._xs[0])
            & (x <= self._xs[-1])
            & (y >= self._ys[0])
            & (y <= self._ys[-1])
        )

    def _check_bounds(self, x, y):
        ok = self.contains(x, y)
        if not np.all(ok):
            bad = np.argwhere(~np.atleast_1d(ok)).ravel()[0]
            bx = float(np.atleast_1d(x)[bad])
            by = float(np.atleast_1d(y)[bad])
            raise TerrainBoundsError(
                f"query ({bx:.6g}, {by:.6g}) outside terrain bounds "
                f"x in [{self._xs[0]:.6g}, {self._xs[-1]:.6g}], "
                f"y in [{self._ys[0]:.6g}, {self._ys[-1]:.6g}]"
            )

    # -- derivative stacks ---------------------------------------------------

    def _derivs(self, x, y):
        """First and second spline derivatives at in-bounds points."""
        s = self._spline
        h = s.ev(x, y)
        hx = s.ev(x, y, dx=1)
        hy = s.ev(x, y, dy=1)
        hxx = s.ev(x, y, dx=2)
        hxy = s.ev(x, y, dx=1, dy=1)
        hyy = s.ev(x, y, dy=2)
        return h, hx, hy, hxx, hxy, hyy

    def _third_derivs(self, x, y):
        """Third derivatives of the interpolant.

        Mixed terms come from derivative splines.  The pure terms h_xxx and
        h_yyy are the slopes of h_xx (piecewise linear in x) and h_yy, so a
        centered difference inside one knot span evaluates them exactly.
        """
        hxxy = self._d21(x, y, grid=False)
        hxyy = self._d12(x, y, grid=False)
        d = self._cell / 16.0
        xm = np.clip(x - d, self._xs[0], self._xs[-1])
        xp = np.clip(x + d, self._xs[0], self._xs[-1])
        hxxx = (self._d20(xp, y, grid=False) - self._d20(xm, y, grid=False)) / (xp - xm)
        ym = np.clip(y - d, self._ys[0], self._ys[-1])
        yp = np.clip(y + d, self._ys[0], self._ys[-1])
        hyyy = (self._d02(x, yp, grid=False) - self._d02(x, ym, grid=False)) / (yp - ym)
        return hxxx, hxxy, hxyy, hyyy

    # -- queries -------------------------------------------------------------

    def height_at(self, x, y):
        self._check_bounds(x, y)
        out = self._spline.ev(x, y)
        return float(out) if np.ndim(x) == 0 and np.ndim(y) == 0 else out

    def query(self, x, y):
        """Full differential-geometry record at a single point."""
        self._check_bounds(x, y)
        h, hx, hy, hxx, hxy, hyy = (float(v) for v in self._derivs(x, y))
        grad = np.array([hx, hy])
        hess = np.array([[hxx, hxy], [hxy, hyy]])
        normal = np.array([-hx, -hy, 1.0]) / np.sqrt(1.0 + hx * hx + hy * hy)
        return TerrainQuery(height=h, gradient=grad, hessian=hess, normal=normal)

    def pitch_along_heading(self, x, y, psi):
        """Pitch angle when heading along ``psi``, positive uphill.

        Returns ``(phi, d_phi)`` with ``d_phi`` stacking the partials with
        respect to x, y and psi.  Accepts scalars or matching arrays.
        """
        self._check_bounds(x, y)
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0 and np.ndim(psi) == 0
        x, y, psi = np.broadcast_arrays(
            np.asarray(x, float), np.asarray(y, float), np.asarray(psi, float)
        )
        _, hx, hy, hxx, hxy, hyy = self._derivs(x, y)
        cpsi, spsi = np.cos(psi), np.sin(psi)
        slope = hx * cpsi + hy * spsi
        phi = np.arctan(slope)
        denom = 1.0 + slope * slope
        d_phi = np.stack(
            [
                (hxx * cpsi + hxy * spsi) / denom,
                (hxy * cpsi + hyy * spsi) / denom,
                (-hx * spsi + hy * cpsi) / denom,
            ]
        )
        if scalar:
            return float(phi), d_phi.reshape(3)
        return phi, d_phi

    def attitude_angle(self, x, y):
        """Angle between the surface normal and global vertical.

        Returns ``(xi, d_xi)``; ``xi`` is in [0, pi/2) and its gradient is
        taken as zero at exactly flat points (cone vertex of the norm).
        """
        self._check_bounds(x, y)
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        _, hx, hy, hxx, hxy, hyy = self._derivs(x, y)
        q = np.hypot(hx, hy)
        xi = np.arctan(q)
        safe_q = np.where(q > 1e-12, q, 1.0)
        scale = 1.0 / (safe_q * (1.0 + q * q))
        d_xi = np.stack(
            [
                np.where(q > 1e-12, (hx * hxx + hy * hxy) * scale, 0.0),
                np.where(q > 1e-12, (hx * hxy + hy * hyy) * scale, 0.0),
            ]
        )
        if scalar:
            return float(xi), d_xi.reshape(2)
        return xi, d_xi

    def risk_density(self, x, y, curvature_weight=None):
        """Pluggable traversal-risk density and its spatial gradient.

        ``r = |grad h|^2 + lam * |Hess h|_F^2`` with ``lam`` the map's
        ``risk_curvature_weight`` unless overridden per call.
        """
        self._check_bounds(x, y)
        lam = self.risk_curvature_weight if curvature_weight is None else float(curvature_weight)
        if lam < 0.0:
            raise ValueError("curvature_weight must be >= 0")
        scalar = np.ndim(x) == 0 and np.ndim(y) == 0
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        _, hx, hy, hxx, hxy, hyy = self._derivs(x, y)
        r = hx * hx + hy * hy
        drx = 2.0 * (hx * hxx + hy * hxy)
        dry = 2.0 * (hx * hxy + hy * hyy)
        if lam > 0.0:
            hxxx, hxxy, hxyy, hyyy = self._third_derivs(x, y)
            r = r + lam * (hxx * hxx + 2.0 * hxy * hxy + hyy * hyy)
            drx = drx + 2.0 * lam * (hxx * hxxx + 2.0 * hxy * hxxy + hyy * hxyy)
            dry = dry + 2.0 * lam * (hxx * hxxy + 2.0 * hxy * hxyy + hyy * hyyy)
        d_r = np.stack([drx, dry])
        if scalar:
            return float(r), d_r.reshape(2)
        return r, d_r


# -- file I/O ----------------------------------------------------------------

_ESRI_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def _parse_esri_ascii(text, path):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = {}
    idx = 0
    while idx < len(lines):
        parts = lines[idx].split()
        key = parts[0].lower()
        if key not in _ESRI_HEADER_KEYS:
            break
        if len(parts) != 2:
            raise TerrainFormatError(f"{path}: malformed header line {idx + 1}: {lines[idx]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError as exc:
            raise TerrainFormatError(f"{path}: bad header value on line {idx + 1}") from exc
        idx += 1
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise TerrainFormatError(f"{path}: missing header field {key!r}")
    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    nodata = header.get("nodata_value")

    rows = lines[idx:]
    if len(rows) != nrows:
        raise TerrainFormatError(
            f"{path}: expected {nrows} data rows, found {len(rows)}"
        )
    grid = np.empty((nrows, ncols), dtype=float)
    for i, row in enumerate(rows):
        vals = row.split()
        if len(vals) != ncols:
            raise TerrainFormatError(
                f"{path}: row {i + 1} has {len(vals)} values, expected {ncols}"
            )
        try:
            grid[i] = [float(v) for v in vals]
        except ValueError as exc:
            raise TerrainFormatError(f"{path}: non-numeric value in row {i + 1}") from exc
    if nodata is not None and np.any(grid == nodata):
        i, j = np.argwhere(grid == nodata)[0]
        raise TerrainFormatError(f"{path}: NODATA cell at row {i + 1}, column {j + 1}")
    # File rows run north to south; flip so row index grows with y.
    heights = np.flipud(grid)
    return (header["xllcorner"], header["yllcorner"]), header["cellsize"], heights


def _parse_csv_grid(text, path):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TerrainFormatError(f"{path}: empty file")
    head = lines[0].split(",")
    if len(head) != 3:
        raise TerrainFormatError(
            f"{path}: first line must be 'origin_x,origin_y,cell_size'"
        )
    try:
        ox, oy, cell = (float(v) for v in head)
    except ValueError as exc:
        raise TerrainFormatError(f"{path}: non-numeric grid header") from exc
    rows = lines[1:]
    width = len(rows[0].split(",")) if rows else 0
    grid = np.empty((len(rows), width), dtype=float)
    for i, row in enumerate(rows):
        vals = row.split(",")
        if len(vals) != width:
            raise TerrainFormatError(
                f"{path}: row {i + 1} has {len(vals)} values, expected {width}"
            )
        try:
            grid[i] = [float(v) for v in vals]
        except ValueError as exc:
            raise TerrainFormatError(f"{path}: non-numeric value in row {i + 1}") from exc
    return (ox, oy), cell, grid


def load_heightmap(path, format="esri_ascii_grid", risk_curvature_weight=0.1):
    """Load a gridded heightmap from disk.

    ``format`` is ``"esri_ascii_grid"`` or ``"csv_grid"``; see the module
    docstring for the row/column conventions of each.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise TerrainFormatError(f"cannot read heightmap {path}: {exc}") from exc
    if format == "esri_ascii_grid":
        origin, cell, heights = _parse_esri_ascii(text, path)
    elif format == "csv_grid":
        origin, cell, heights = _parse_csv_grid(text, path)
    else:
        raise TerrainFormatError(f"unknown heightmap format {format!r}")
    return TerrainMap(origin, cell, heights, risk_curvature_weight=risk_curvature_weight)


def write_esri_ascii(tmap, path, nodata=-9999.0):
    """Write a TerrainMap in the ESRI-ASCII-style grid format."""
    nrows, ncols = tmap.heights.shape
    ox, oy = (float(v) for v in tmap.origin)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"ncols {ncols}\n")
        fh.write(f"nrows {nrows}\n")
        fh.write(f"xllcorner {ox!r}\n")
        fh.write(f"yllcorner {oy!r}\n")
        fh.write(f"cellsize {float(tmap.cell_size)!r}\n")
        fh.write(f"NODATA_value {float(nodata)!r}\n")
        for row in np.flipud(tmap.heights):  # north to south
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_csv_grid(tmap, path):
    """Write a TerrainMap in the CSV grid format."""
    ox, oy = (float(v) for v in tmap.origin)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{ox!r},{oy!r},{float(tmap.cell_size)!r}\n")
        for row in tmap.heights:  # south to north
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
