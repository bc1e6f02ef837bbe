"""Instantaneous power models, the smooth power-limit penalty, and gradients.

All quantities live on the projected plane: velocities/accelerations are
global-frame components, headings are projected yaw, and the terrain enters
through the pitch angle ``phi`` (along heading) and attitude angle ``xi``.
Every function here is pure and safe for concurrent use; the module-level
kernels accept numpy arrays so callers can evaluate whole sample batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np
from scipy.special import expit

from .errors import DegenerateStateError, ProfileSpanError

__all__ = [
    "PowerParams",
    "MotionState",
    "PowerBreakdown",
    "PowerGradient",
    "PenaltyTerms",
    "softplus",
    "motion_power",
    "motion_power_gradient",
    "resistive_power_gradient",
    "power_penalty",
    "available_power",
    "consumed_power_nonneg",
]

EPS_V_GRADIENT = 1e-6  # m/s; below this the linear-power gradient is degenerate

TAU_MODES = ("headroom", "literal")


@dataclass(frozen=True)
class PowerParams:
    """Physical constants and penalty shape parameters.

    ``P_limit`` is the instantaneous cap used by the penalty; it defaults to
    ``P_RTG + P_solar`` when left as None.
    """

    m: float = 150.0
    I_z: float = 60.0
    g: float = 1.62
    C0: float = 20.0
    C1: float = 5.0
    C2: float = 0.0
    P_base: float = 100.0
    P_RTG: float = 110.0
    P_solar: float = 90.0
    omega_E: float = 1e-2
    kappa: float = 0.05
    P_limit: float | None = None

    def __post_init__(self):
        if self.m <= 0 or self.I_z <= 0 or self.g <= 0:
            raise ValueError("m, I_z and g must be positive")
        if self.C0 < 0 or self.C1 < 0 or self.C2 < 0:
            raise ValueError("resistive coefficients must be >= 0")
        if self.P_base < 0 or self.P_RTG < 0 or self.P_solar < 0:
            raise ValueError("power levels must be >= 0")
        if self.omega_E < 0:
            raise ValueError("omega_E must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.P_limit is not None and self.P_limit <= 0:
            raise ValueError("P_limit must be positive when set")

    @property
    def effective_limit(self):
        return self.P_RTG + self.P_solar if self.P_limit is None else self.P_limit

    def to_json_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_json_dict(cls, data):
        known = {f.name for f in dc_fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown PowerParams keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class MotionState:
    """Projected kinematic state plus terrain angles at one instant."""

    vx_G: float = 0.0
    vy_G: float = 0.0
    ax_G: float = 0.0
    ay_G: float = 0.0
    psi_G: float = 0.0
    omega_G: float = 0.0
    domega_G: float = 0.0
    phi: float = 0.0
    xi: float = 0.0

    def __post_init__(self):
        if not abs(self.phi) < math.pi / 2:
            raise ValueError("|phi| must be < pi/2")
        if not abs(self.xi) < math.pi / 2:
            raise ValueError("|xi| must be < pi/2")

    @property
    def v_G(self):
        return math.hypot(self.vx_G, self.vy_G)


@dataclass(frozen=True)
class PowerBreakdown:
    """Instantaneous power decomposition.

    ``P_cons`` is the exact signed sum ``((P_lin + P_rot) + P_res) + P_base``;
    ``S`` the motion-power magnitude and ``tau`` the slack entering the
    penalty argument ``z = S - tau`` (see ``tau_mode``).
    """

    P_lin: float
    P_rot: float
    P_res: float
    P_base: float
    P_cons: float
    P_avail: float
    S: float
    tau: float
    tau_mode: str = "headroom"


@dataclass(frozen=True)
class PowerGradient:
    """Analytic gradients of the motion power terms.

    ``d_P_lin`` stacks partials over (vx_G, vy_G, ax_G, ay_G, psi_G, phi);
    ``d_P_rot`` over (omega_G, domega_G, xi).
    """

    d_P_lin: np.ndarray
    d_P_rot: np.ndarray


@dataclass(frozen=True)
class PenaltyTerms:
    """Squared-softplus power penalty and its partials.

    ``d_z`` is dJ/dz; ``d_P_lin``/``d_P_rot`` already include the tau-mode
    dependence of z on the respective power term.
    """

    value: float
    d_P_lin: float
    d_P_rot: float
    d_z: float
    z: float


# -- scalar/vector kernels -----------------------------------------------------


def softplus(z, kappa):
    """Numerically stable SP(z) = log(1 + exp(kappa z)) / kappa."""
    return np.logaddexp(0.0, np.asarray(z, dtype=float) * kappa) / kappa


def _tau_slack(P_res, P_cons, params, tau_mode):
    cap = params.effective_limit
    if tau_mode == "headroom":
        return cap - (params.P_base + P_res)
    if tau_mode == "literal":
        return cap - P_cons
    raise ValueError(f"unknown tau_mode {tau_mode!r}; expected one of {TAU_MODES}")


def power_fields(vx, vy, ax, ay, psi, omega, domega, phi, xi, params, tau_mode="headroom"):
    """Vectorized power breakdown; returns a dict of arrays.

    Shared by the scalar API and the planner's batched objective; the sum
    order of P_cons is fixed so the decomposition identity is bitwise.
    """
    cpsi, spsi = np.cos(psi), np.sin(psi)
    a = ax * cpsi + ay * spsi
    b = -ax * spsi + ay * cpsi
    v = np.hypot(vx, vy)
    s, c = np.sin(phi), np.cos(phi)
    P_lin = params.m * (a / c + params.g * s) * (v / c)
    P_rot = params.I_z * domega * omega / np.cos(xi)
    x_B = v / c
    P_res = (params.C0 + params.C1 * np.abs(x_B) + params.C2 * x_B * x_B) * x_B
    P_cons = ((P_lin + P_rot) + P_res) + params.P_base
    S = np.hypot(P_lin, P_rot)
    tau = _tau_slack(P_res, P_cons, params, tau_mode)
    return {
        "a": a,
        "b": b,
        "v": v,
        "x_B": x_B,
        "P_lin": P_lin,
        "P_rot": P_rot,
        "P_res": P_res,
        "P_cons": P_cons,
        "P_avail": np.broadcast_to(
            np.asarray(params.P_RTG + params.P_solar, dtype=float), np.shape(P_cons)
        ).copy()
        if np.ndim(P_cons)
        else params.P_RTG + params.P_solar,
        "S": S,
        "tau": tau,
        "z": S - tau,
    }


def power_gradients(vx, vy, ax, ay, psi, omega, domega, phi, xi, params):
    """Vectorized closed-form gradients of P_lin and P_rot.

    Entries involving 1/v are computed with v clamped below at
    ``EPS_V_GRADIENT``; callers must mask samples that are actually at rest.
    """
    cpsi, spsi = np.cos(psi), np.sin(psi)
    a = ax * cpsi + ay * spsi
    b = -ax * spsi + ay * cpsi
    v = np.hypot(vx, vy)
    v_safe = np.maximum(v, EPS_V_GRADIENT)
    s, c = np.sin(phi), np.cos(phi)
    m, g = params.m, params.g
    common = m * (a / c + g * s)
    dlin_dvx = common * vx / (c * v_safe)
    dlin_dvy = common * vy / (c * v_safe)
    dlin_dax = m * v * cpsi / (c * c)
    dlin_day = m * v * spsi / (c * c)
    dlin_dpsi = m * v * b / (c * c)
    dlin_dphi = m * v * (2.0 * a * s / (c * c * c) + g / (c * c))
    cxi = np.cos(xi)
    drot_domega = params.I_z * domega / cxi
    drot_ddomega = params.I_z * omega / cxi
    drot_dxi = params.I_z * domega * omega * np.sin(xi) / (cxi * cxi)
    return {
        "dlin_dvx": dlin_dvx,
        "dlin_dvy": dlin_dvy,
        "dlin_dax": dlin_dax,
        "dlin_day": dlin_day,
        "dlin_dpsi": dlin_dpsi,
        "dlin_dphi": dlin_dphi,
        "drot_domega": drot_domega,
        "drot_ddomega": drot_ddomega,
        "drot_dxi": drot_dxi,
    }


def penalty_fields(fields, params, tau_mode="headroom"):
    """Vectorized squared-softplus penalty over a power-field batch.

    Returns dict with J (penalty), dJ_dz, and the z-partials of the power
    terms entering z (dz_dPlin, dz_dProt, dz_dPres).
    """
    z = fields["z"]
    sp = softplus(z, params.kappa)
    sig = expit(params.kappa * z)
    J = params.omega_E * sp * sp
    dJ_dz = 2.0 * params.omega_E * sp * sig
    S = fields["S"]
    safe_S = np.where(np.asarray(S) > 0.0, S, 1.0)
    frac_lin = np.where(np.asarray(S) > 0.0, fields["P_lin"] / safe_S, 0.0)
    frac_rot = np.where(np.asarray(S) > 0.0, fields["P_rot"] / safe_S, 0.0)
    extra = 1.0 if tau_mode == "literal" else 0.0
    return {
        "J": J,
        "dJ_dz": dJ_dz,
        "dz_dPlin": frac_lin + extra,
        "dz_dProt": frac_rot + extra,
        "dz_dPres": np.ones_like(np.asarray(z, dtype=float)),
    }


# -- public scalar operations ---------------------------------------------------


def motion_power(state, params, tau_mode="headroom"):
    """Evaluate the full power breakdown at one motion state."""
    f = power_fields(
        state.vx_G,
        state.vy_G,
        state.ax_G,
        state.ay_G,
        state.psi_G,
        state.omega_G,
        state.domega_G,
        state.phi,
        state.xi,
        params,
        tau_mode=tau_mode,
    )
    return PowerBreakdown(
        P_lin=float(f["P_lin"]),
        P_rot=float(f["P_rot"]),
        P_res=float(f["P_res"]),
        P_base=params.P_base,
        P_cons=float(f["P_cons"]),
        P_avail=float(f["P_avail"]),
        S=float(f["S"]),
        tau=float(f["tau"]),
        tau_mode=tau_mode,
    )


def motion_power_gradient(state, params, eps_v=EPS_V_GRADIENT):
    """Closed-form gradients of P_lin and P_rot at one motion state.

    Raises DegenerateStateError below ``eps_v`` speed: the P_lin gradient
    contains 1/v_G, and callers should use the rest-state shortcut (gradient
    taken as zero at exact rest) instead.
    """
    if state.v_G < eps_v:
        raise DegenerateStateError(
            f"speed {state.v_G:.3e} m/s below {eps_v:.1e}; "
            "use the rest-state shortcut (P_lin gradient = 0 at rest)"
        )
    g = power_gradients(
        state.vx_G,
        state.vy_G,
        state.ax_G,
        state.ay_G,
        state.psi_G,
        state.omega_G,
        state.domega_G,
        state.phi,
        state.xi,
        params,
    )
    d_lin = np.array(
        [g["dlin_dvx"], g["dlin_dvy"], g["dlin_dax"], g["dlin_day"], g["dlin_dpsi"], g["dlin_dphi"]],
        dtype=float,
    )
    d_rot = np.array([g["drot_domega"], g["drot_ddomega"], g["drot_dxi"]], dtype=float)
    return PowerGradient(d_P_lin=d_lin, d_P_rot=d_rot)


def resistive_power_gradient(vx_B, params):
    """d P_res / d vx_B; returns C0 at vx_B = 0 (subgradient choice)."""
    return params.C0 + 2.0 * params.C1 * abs(vx_B) + 3.0 * params.C2 * vx_B * vx_B


def power_penalty(breakdown, params):
    """Squared-softplus penalty of a breakdown and its power partials.

    At S = 0 the P_lin/P_rot partials are the removable limit 0 (headroom
    mode); the slope dJ/dz stays available for the resistive chain.
    """
    f = {
        "z": breakdown.S - breakdown.tau,
        "S": breakdown.S,
        "P_lin": breakdown.P_lin,
        "P_rot": breakdown.P_rot,
    }
    p = penalty_fields(f, params, tau_mode=breakdown.tau_mode)
    dJ_dz = float(p["dJ_dz"])
    return PenaltyTerms(
        value=float(p["J"]),
        d_P_lin=dJ_dz * float(p["dz_dPlin"]),
        d_P_rot=dJ_dz * float(p["dz_dProt"]),
        d_z=dJ_dz,
        z=float(f["z"]),
    )


def available_power(t, params, profile=None):
    """Available power at time t: constant RTG + solar, or a table override.

    ``profile`` is a sequence of (t, P) pairs interpolated linearly; queries
    outside its span raise ProfileSpanError.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be >= 0")
    if profile is None:
        const = params.P_RTG + params.P_solar
        return float(const) if t_arr.ndim == 0 else np.full(t_arr.shape, const)
    pts = np.asarray(profile, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("profile must be a sequence of (t, P) pairs")
    ts, Ps = pts[:, 0], pts[:, 1]
    if np.any(np.diff(ts) <= 0):
        raise ValueError("profile times must be strictly increasing")
    if np.any(t_arr < ts[0]) or np.any(t_arr > ts[-1]):
        raise ProfileSpanError(
            f"time query outside profile span [{ts[0]:.6g}, {ts[-1]:.6g}]"
        )
    out = np.interp(t_arr, ts, Ps)
    return float(out) if t_arr.ndim == 0 else out


def consumed_power_nonneg(P_lin, P_rot, P_res, P_base):
    """Budget-side consumption: no regenerative credit for braking."""
    return ((np.maximum(P_lin, 0.0) + np.maximum(P_rot, 0.0)) + P_res) + P_base
