"""Piecewise-quintic SE(2) trajectories with per-segment durations.

A trajectory is an ordered list of quintic segments for x(t) and y(t); yaw is
derived from the velocity direction (differential drive: no lateral body
velocity), with angular rate and acceleration from the curvature formulas.
Wait segments hold a constant position.

Trajectories are immutable values; evaluation is pure.  Sensitivities of all
sampled quantities with respect to raw segment coefficients and durations are
available for gradient-based optimization, with durations perturbed at fixed
local-time fraction (samples ride along when a segment stretches).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import HorizonError, TerrainBoundsError, TrajectoryFormatError

__all__ = [
    "EPS_V",
    "SplineSegment",
    "SplineTrajectorySE2",
    "TrajectorySample",
    "SampleSensitivity",
    "hermite_coefficients",
    "hermite_matrix",
    "hermite_matrix_dT",
    "jerk_energy_segment",
    "jerk_energy",
    "yaw_rate_partials",
    "initial_guess",
]

EPS_V = 1e-3  # m/s; below this yaw is held and rotational quantities are zero

FORMAT_VERSION = 1

SAMPLE_QUANTITIES = ("x", "y", "vx", "vy", "ax", "ay", "psi", "omega", "domega")

# Hermite map entries as (coefficient, power of T); c = H(T) @ (p0,v0,a0,p1,v1,a1)
_HERMITE_TABLE = (
    ((1.0, 0), (0.0, 0), (0.0, 0), (0.0, 0), (0.0, 0), (0.0, 0)),
    ((0.0, 0), (1.0, 0), (0.0, 0), (0.0, 0), (0.0, 0), (0.0, 0)),
    ((0.0, 0), (0.0, 0), (0.5, 0), (0.0, 0), (0.0, 0), (0.0, 0)),
    ((-10.0, -3), (-6.0, -2), (-1.5, -1), (10.0, -3), (-4.0, -2), (0.5, -1)),
    ((15.0, -4), (8.0, -3), (1.5, -2), (-15.0, -4), (7.0, -3), (-1.0, -2)),
    ((-6.0, -5), (-3.0, -4), (-0.5, -3), (6.0, -5), (-3.0, -4), (0.5, -3)),
)


def hermite_matrix(T):
    """6x6 map from boundary values (p0, v0, a0, p1, v1, a1) to coefficients."""
    H = np.empty((6, 6))
    for i, row in enumerate(_HERMITE_TABLE):
        for j, (coef, p) in enumerate(row):
            H[i, j] = coef * T**p
    return H

def hermite_matrix_dT(T):
    """Elementwise derivative of hermite_matrix with respect to T."""
    dH = np.empty((6, 6))
    for i, row in enumerate(_HERMITE_TABLE):
        for j, (coef, p) in enumerate(row):
            dH[i, j] = coef * p * T ** (p - 1) if p != 0 else 0.0
    return dH


def hermite_coefficients(boundary, T):
    """Quintic coefficients interpolating (p, v, a) at both segment ends."""
    return hermite_matrix(T) @ np.asarray(boundary, dtype=float)


@dataclass(frozen=True)
class SplineSegment:
    """One quintic piece; coefficients are in ascending powers of local time."""

    coeffs_x: np.ndarray
    coeffs_y: np.ndarray
    duration: float
    kind: str = "motion"

    def __post_init__(self):
        object.__setattr__(self, "coeffs_x", np.asarray(self.coeffs_x, dtype=float).reshape(6))
        object.__setattr__(self, "coeffs_y", np.asarray(self.coeffs_y, dtype=float).reshape(6))
        if self.duration <= 0.0:
            raise ValueError("segment duration must be positive")
        if self.kind not in ("motion", "wait"):
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.kind == "wait" and (
            np.any(self.coeffs_x[1:] != 0.0) or np.any(self.coeffs_y[1:] != 0.0)
        ):
            raise ValueError("wait segments must have constant position")


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    jx: float
    jy: float
    psi: float
    omega: float
    domega: float

    @property
    def speed(self):
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class SampleSensitivity:
    """Partials of the sampled quantities w.r.t. one segment's parameters.

    Rows follow SAMPLE_QUANTITIES.  ``d_dT`` holds the sample's local-time
    fraction fixed while the duration stretches.  When ``degenerate`` is set
    (speed below EPS_V) the yaw/omega/domega rows are zeroed and must be
    skipped by optimizers.
    """

    segment: int
    degenerate: bool
    d_dcx: np.ndarray  # (9, 6)
    d_dcy: np.ndarray  # (9, 6)
    d_dT: np.ndarray  # (9,)


def _poly_eval(c, u):
    """Value and first four derivatives of a quintic at local time u."""
    c0, c1, c2, c3, c4, c5 = c
    p = ((((c5 * u + c4) * u + c3) * u + c2) * u + c1) * u + c0
    v = (((5 * c5 * u + 4 * c4) * u + 3 * c3) * u + 2 * c2) * u + c1
    a = ((20 * c5 * u + 12 * c4) * u + 6 * c3) * u + 2 * c2
    j = (60 * c5 * u + 24 * c4) * u + 6 * c3
    s = 120 * c5 * u + 24 * c4
    return p, v, a, j, s


def polynomial_basis(u, n_deriv=4):
    """Rows of d^k/du^k [1, u, ..., u^5] for k = 0..n_deriv; shape (k, ..., 6)."""
    u = np.asarray(u, dtype=float)
    out = np.zeros((n_deriv + 1,) + u.shape + (6,))
    for k in range(6):
        fact = 1.0
        for d in range(n_deriv + 1):
            p = k - d
            if p < 0:
                break
            out[(d, ..., k)] = fact * u**p
            fact *= p
    return out


def yaw_rate_partials(vx, vy, ax, ay, jx, jy):
    """Partials of (psi, omega, domega) w.r.t. (vx, vy, ax, ay, jx, jy).

    Vectorized; callers must mask samples with speed below EPS_V where these
    quantities are undefined.
    """
    v2 = vx * vx + vy * vy
    v2 = np.where(np.asarray(v2) > 0.0, v2, 1.0)
    N1 = vx * ay - vy * ax
    N2 = vx * jy - vy * jx
    D = vx * ax + vy * ay
    zeros = np.zeros_like(np.asarray(v2, dtype=float))

    dpsi = np.stack([-vy / v2, vx / v2, zeros, zeros, zeros, zeros])

    domega_row = np.stack(
        [
            ay / v2 - 2.0 * vx * N1 / v2**2,
            -ax / v2 - 2.0 * vy * N1 / v2**2,
            -vy / v2,
            vx / v2,
            zeros,
            zeros,
        ]
    )

    dN2 = np.stack([jy, -jx, zeros, zeros, -vy, vx])
    dN1 = np.stack([ay, -ax, -vy, vx, zeros, zeros])
    dD = np.stack([ax, ay, vx, vy, zeros, zeros])
    dv2 = np.stack([2.0 * vx, 2.0 * vy, zeros, zeros, zeros, zeros])
    ddomega_row = (
        dN2 / v2
        - N2 / v2**2 * dv2
        - 2.0 * (dN1 * D + N1 * dD) / v2**2
        + 4.0 * N1 * D / v2**3 * dv2
    )
    return dpsi, domega_row, ddomega_row


class SplineTrajectorySE2:
    """Immutable piecewise-quintic trajectory on the projected plane."""

    def __init__(self, segments, t0=0.0, rest_yaw=0.0):
        if not segments:
            raise ValueError("trajectory needs at least one segment")
        self.segments = tuple(segments)
        self.t0 = float(t0)
        self.rest_yaw = float(rest_yaw)
        durs = np.array([s.duration for s in self.segments])
        self._starts = self.t0 + np.concatenate([[0.0], np.cumsum(durs)])

    @property
    def duration(self):
        return float(self._starts[-1] - self.t0)

    @property
    def t_end(self):
        return float(self._starts[-1])

    def segment_start_times(self):
        return self._starts[:-1].copy()

    def has_motion(self):
        return any(s.kind == "motion" for s in self.segments)

    def locate(self, t):
        """Segment index and local time for t; end of horizon maps to the last segment."""
        if t < self.t0 - 1e-9 or t > self.t_end + 1e-9:
            raise HorizonError(
                f"t = {t:.6g} outside horizon [{self.t0:.6g}, {self.t_end:.6g}]"
            )
        t = min(max(t, self.t0), self.t_end)
        idx = int(np.searchsorted(self._starts, t, side="right") - 1)
        idx = min(idx, len(self.segments) - 1)
        return idx, t - self._starts[idx]

    # -- evaluation --------------------------------------------------------

    def _motion_at(self, t):
        idx, u = self.locate(t)
        seg = self.segments[idx]
        x, vx, ax, jx, sx = _poly_eval(seg.coeffs_x, u)
        y, vy, ay, jy, sy = _poly_eval(seg.coeffs_y, u)
        return idx, u, (x, y, vx, vy, ax, ay, jx, jy, sx, sy)

    def _yaw_fallback(self, t):
        """Yaw near rest: prefer the last well-defined value, then upcoming motion."""
        span = self.duration
        for frac in (1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0):
            for tp in (t - frac * span, t + frac * span):
                if self.t0 <= tp <= self.t_end:
                    _, _, m = self._motion_at(tp)
                    if math.hypot(m[2], m[3]) >= EPS_V:
                        return math.atan2(m[3], m[2])
        return self.rest_yaw

    def evaluate(self, t):
        """Kinematic sample at time t (position through angular acceleration)."""
        _, _, (x, y, vx, vy, ax, ay, jx, jy, _, _) = self._motion_at(t)
        v2 = vx * vx + vy * vy
        if v2 >= EPS_V * EPS_V:
            psi = math.atan2(vy, vx)
            omega = (vx * ay - vy * ax) / v2
            domega = (vx * jy - vy * jx) / v2 - 2.0 * omega * (vx * ax + vy * ay) / v2
        else:
            psi = self._yaw_fallback(t)
            omega = 0.0
            domega = 0.0
        return TrajectorySample(
            t=t, x=x, y=y, vx=vx, vy=vy, ax=ax, ay=ay, jx=jx, jy=jy,
            psi=psi, omega=omega, domega=domega,
        )

    def sample_derivatives(self, t):
        """Sensitivities of the sampled quantities for the segment owning t."""
        idx, u, (x, y, vx, vy, ax, ay, jx, jy, sx, sy) = self._motion_at(t)
        seg = self.segments[idx]
        T = seg.duration
        theta = u / T
        B = polynomial_basis(u)  # (5, 6)

        d_dcx = np.zeros((9, 6))
        d_dcy = np.zeros((9, 6))
        d_dcx[0] = B[0]  # x
        d_dcy[1] = B[0]  # y
        d_dcx[2] = B[1]  # vx
        d_dcy[3] = B[1]
        d_dcx[4] = B[2]  # ax
        d_dcy[5] = B[2]

        # time chain at fixed fraction: d(quantity)/dT = theta * d(quantity)/du
        d_dT = np.zeros(9)
        d_dT[0] = theta * vx
        d_dT[1] = theta * vy
        d_dT[2] = theta * ax
        d_dT[3] = theta * ay
        d_dT[4] = theta * jx
        d_dT[5] = theta * jy

        degenerate = math.hypot(vx, vy) < EPS_V
        if not degenerate:
            dpsi, domg, ddomg = yaw_rate_partials(vx, vy, ax, ay, jx, jy)
            # inputs (vx, vy, ax, ay, jx, jy): basis rows and du-derivatives
            in_dcx = np.stack([B[1], np.zeros(6), B[2], np.zeros(6), B[3], np.zeros(6)])
            in_dcy = np.stack([np.zeros(6), B[1], np.zeros(6), B[2], np.zeros(6), B[3]])
            in_du = np.array([ax, ay, jx, jy, sx, sy])
            for row, part in zip((6, 7, 8), (dpsi, domg, ddomg)):
                d_dcx[row] = part @ in_dcx
                d_dcy[row] = part @ in_dcy
                d_dT[row] = theta * float(part @ in_du)

        return SampleSensitivity(
            segment=idx, degenerate=degenerate, d_dcx=d_dcx, d_dcy=d_dcy, d_dT=d_dT
        )

    # -- editing -----------------------------------------------------------

    def with_wait_prefix(self, duration):
        """New trajectory with a zero-velocity wait segment prepended."""
        if duration <= 0.0:
            raise ValueError("wait duration must be positive")
        first = self.segments[0]
        cx = np.zeros(6)
        cy = np.zeros(6)
        cx[0] = first.coeffs_x[0]
        cy[0] = first.coeffs_y[0]
        wait = SplineSegment(cx, cy, duration, kind="wait")
        return SplineTrajectorySE2(
            (wait,) + self.segments, t0=self.t0, rest_yaw=self.rest_yaw
        )

    # -- serialization -------------------------------------------------------

    def to_json_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "t0": self.t0,
            "rest_yaw": self.rest_yaw,
            "segments": [
                {
                    "coeffs_x": [float(v) for v in s.coeffs_x],
                    "coeffs_y": [float(v) for v in s.coeffs_y],
                    "duration": float(s.duration),
                    "kind": s.kind,
                }
                for s in self.segments
            ],
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json_dict(cls, data):
        try:
            version = data["format_version"]
            if version != FORMAT_VERSION:
                raise TrajectoryFormatError(
                    f"unsupported trajectory format version {version}; "
                    f"this build reads version {FORMAT_VERSION}"
                )
            segments = [
                SplineSegment(
                    np.asarray(s["coeffs_x"], dtype=float),
                    np.asarray(s["coeffs_y"], dtype=float),
                    float(s["duration"]),
                    s.get("kind", "motion"),
                )
                for s in data["segments"]
            ]
            return cls(segments, t0=float(data.get("t0", 0.0)),
                       rest_yaw=float(data.get("rest_yaw", 0.0)))
        except TrajectoryFormatError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise TrajectoryFormatError(f"malformed trajectory data: {exc}") from exc

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrajectoryFormatError(f"invalid trajectory JSON: {exc}") from exc
        return cls.from_json_dict(data)


# -- jerk energy ---------------------------------------------------------------


def jerk_energy_segment(cx, cy, T):
    """Closed-form integral of squared jerk over one segment plus gradients.

    Returns (E, dE_dcx3, dE_dcy3, dE_dT) where the coefficient gradients cover
    (c3, c4, c5); lower coefficients do not enter the jerk.
    """
    E = 0.0
    dE_dT = 0.0
    grads = []
    for c in (cx, cy):
        c3, c4, c5 = c[3], c[4], c[5]
        E += (
            36.0 * c3 * c3 * T
            + 144.0 * c3 * c4 * T**2
            + (192.0 * c4 * c4 + 240.0 * c3 * c5) * T**3
            + 720.0 * c4 * c5 * T**4
            + 720.0 * c5 * c5 * T**5
        )
        grads.append(
            np.array(
                [
                    72.0 * c3 * T + 144.0 * c4 * T**2 + 240.0 * c5 * T**3,
                    144.0 * c3 * T**2 + 384.0 * c4 * T**3 + 720.0 * c5 * T**4,
                    240.0 * c3 * T**3 + 720.0 * c4 * T**4 + 1440.0 * c5 * T**5,
                ]
            )
        )
        dE_dT += (
            36.0 * c3 * c3
            + 288.0 * c3 * c4 * T
            + 3.0 * (192.0 * c4 * c4 + 240.0 * c3 * c5) * T**2
            + 2880.0 * c4 * c5 * T**3
            + 3600.0 * c5 * c5 * T**4
        )
    return E, grads[0], grads[1], dE_dT


def jerk_energy(traj):
    """Integral of squared jerk magnitude over the whole horizon."""
    total = 0.0
    for seg in traj.segments:
        E, _, _, _ = jerk_energy_segment(seg.coeffs_x, seg.coeffs_y, seg.duration)
        total += E
    return total


# -- construction ----------------------------------------------------------------

_JERK_GRAM_POWERS = np.array([[36.0, 72.0, 120.0], [72.0, 192.0, 360.0], [120.0, 360.0, 720.0]])
_JERK_GRAM_EXP = np.array([[1, 2, 3], [2, 3, 4], [3, 4, 5]])


def _jerk_quadratic(T):
    """Gram matrix G with jerk energy = (c3,c4,c5) G (c3,c4,c5)^T."""
    return _JERK_GRAM_POWERS * T**_JERK_GRAM_EXP


def _min_jerk_joint_derivatives(points, durations):
    """Velocities/accelerations at interior joints minimizing total jerk energy.

    ``points``: (n+1,) positions along one axis; boundary derivatives are
    zero.  Returns arrays v (n+1,), a (n+1,).  The optimum makes jerk and
    snap continuous at the joints, so constructed trajectories are C3.
    """
    n = len(durations)
    v = np.zeros(n + 1)
    a = np.zeros(n + 1)
    if n == 1:
        return v, a
    m = 2 * (n - 1)  # unknowns: (v_k, a_k) at interior joints
    A = np.zeros((m, m))
    rhs = np.zeros(m)
    for i, T in enumerate(durations):
        H35 = hermite_matrix(T)[3:, :]
        M = H35.T @ _jerk_quadratic(T) @ H35  # energy = b^T M b
        # boundary vector b = (p0, v0, a0, p1, v1, a1); map entries to unknowns
        fixed = np.array([points[i], 0.0, 0.0, points[i + 1], 0.0, 0.0])
        var_idx = [-1] * 6
        if i > 0:
            var_idx[1] = 2 * (i - 1)
            var_idx[2] = 2 * (i - 1) + 1
        if i < n - 1:
            var_idx[4] = 2 * i
            var_idx[5] = 2 * i + 1
        for r in range(6):
            if var_idx[r] < 0:
                continue
            for s in range(6):
                if var_idx[s] >= 0:
                    A[var_idx[r], var_idx[s]] += 2.0 * M[r, s]
                else:
                    rhs[var_idx[r]] -= 2.0 * M[r, s] * fixed[s]
    sol = np.linalg.solve(A, rhs)
    v[1:-1] = sol[0::2]
    a[1:-1] = sol[1::2]
    return v, a


def initial_guess(start, goal, terrain=None, n_segments=8, v_nominal=0.5):
    """Straight-line minimum-jerk seed trajectory from start to goal poses.

    Poses are (x, y, psi).  Waypoints are uniform on the chord, per-segment
    durations are chord length over ``v_nominal``, and joint derivatives come
    from the jerk-minimizing solve (C3 joints).  A coincident start/goal
    yields a single 1 s wait segment.
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    if v_nominal <= 0:
        raise ValueError("v_nominal must be positive")
    sx, sy, spsi = (float(c) for c in start)
    gx, gy, gpsi = (float(c) for c in goal)
    if terrain is not None:
        for px, py, name in ((sx, sy, "start"), (gx, gy, "goal")):
            if not terrain.contains(px, py):
                raise TerrainBoundsError(f"{name} pose ({px:.6g}, {py:.6g}) outside terrain")

    dist = math.hypot(gx - sx, gy - sy)
    if dist < 1e-12:
        cx = np.zeros(6)
        cy = np.zeros(6)
        cx[0], cy[0] = sx, sy
        seg = SplineSegment(cx, cy, 1.0, kind="wait")
        return SplineTrajectorySE2([seg], rest_yaw=spsi)

    fractions = np.linspace(0.0, 1.0, n_segments + 1)
    xs = sx + fractions * (gx - sx)
    ys = sy + fractions * (gy - sy)
    durations = np.full(n_segments, (dist / n_segments) / v_nominal)
    vx, axx = _min_jerk_joint_derivatives(xs, durations)
    vy, ayy = _min_jerk_joint_derivatives(ys, durations)
    segments = []
    for i, T in enumerate(durations):
        bx = (xs[i], vx[i], axx[i], xs[i + 1], vx[i + 1], axx[i + 1])
        by = (ys[i], vy[i], ayy[i], ys[i + 1], vy[i + 1], ayy[i + 1])
        segments.append(
            SplineSegment(hermite_coefficients(bx, T), hermite_coefficients(by, T), T)
        )
    return SplineTrajectorySE2(segments, rest_yaw=spsi)
