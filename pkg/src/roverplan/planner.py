"""Energy-constrained trajectory optimization on quintic splines.

The objective combines squared-jerk smoothness, a duration term, a terrain
risk path integral, and the squared-softplus power-limit penalty; kinematic
bounds on body-frame velocity and accelerations use the same squared-softplus
machinery.  An outer augmented-Lagrangian loop scales penalty weights and
updates per-sample multipliers while an L-BFGS inner solver minimizes the
smooth objective with analytic gradients.

Decision variables are the interior waypoint positions, interior joint
velocities/accelerations, and per-segment log-durations; segment coefficients
are reconstructed from the boundary values, so endpoint poses hold exactly by
construction.  All per-sample reductions are sequential with fixed order, so
results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from . import power as pw
from .errors import InfeasibleBudgetError, TerrainBoundsError
from .power import PowerBreakdown, softplus
from .trajectory import (
    EPS_V,
    SplineSegment,
    SplineTrajectorySE2,
    hermite_matrix,
    hermite_matrix_dT,
    initial_guess,
    jerk_energy_segment,
    polynomial_basis,
    yaw_rate_partials,
)

__all__ = [
    "PlannerConfig",
    "PowerProfile",
    "PlanResult",
    "SplineProblem",
    "objective_and_gradient",
    "evaluate_profile",
    "plan",
    "enforce_energy_budget",
]


@dataclass(frozen=True)
class PlannerConfig:
    """Weights, bounds and solver knobs for the planner.

    ``constraint_tol`` is relative: the power cap must be met within
    ``constraint_tol * P_limit`` and each kinematic bound within
    ``2 * constraint_tol * bound``.  ``v_nominal`` defaults to 60% of the
    velocity bound when left as None.
    """

    rho_T: float = 1.0
    rho_r: float = 1.0
    vx_B_max: float = 1.2
    ax_B_max: float = 0.8
    ay_B_max: float = 0.8
    samples_per_segment: int = 16
    max_outer_iters: int = 12
    max_inner_iters: int = 120
    grad_tol: float = 1e-6
    constraint_tol: float = 0.01
    tau_mode: str = "headroom"
    n_segments: int = 8
    v_nominal: float | None = None
    e_bank0: float = 0.0
    kin_weight: float = 1.0
    profile_dt: float = 0.1

    def __post_init__(self):
        if self.rho_T < 0 or self.rho_r < 0 or self.kin_weight < 0:
            raise ValueError("weights must be >= 0")
        if min(self.vx_B_max, self.ax_B_max, self.ay_B_max) <= 0:
            raise ValueError("kinematic bounds must be positive")
        if self.samples_per_segment < 8:
            raise ValueError("samples_per_segment must be >= 8")
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.profile_dt <= 0:
            raise ValueError("profile_dt must be positive")
        if self.tau_mode not in pw.TAU_MODES:
            raise ValueError(f"tau_mode must be one of {pw.TAU_MODES}")

    @property
    def nominal_speed(self):
        return 0.6 * self.vx_B_max if self.v_nominal is None else self.v_nominal

    def to_json_dict(self):
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_json_dict(cls, data):
        known = {f.name for f in dc_fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown PlannerConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PowerProfile:
    """Time-sampled power record along a trajectory (struct of arrays)."""

    times: np.ndarray
    P_lin: np.ndarray
    P_rot: np.ndarray
    P_res: np.ndarray
    P_base: np.ndarray
    P_cons: np.ndarray
    P_avail: np.ndarray
    S: np.ndarray
    tau: np.ndarray
    dt: float
    tau_mode: str = "headroom"

    def __len__(self):
        return len(self.times)

    def breakdown(self, i):
        return PowerBreakdown(
            P_lin=float(self.P_lin[i]),
            P_rot=float(self.P_rot[i]),
            P_res=float(self.P_res[i]),
            P_base=float(self.P_base[i]),
            P_cons=float(self.P_cons[i]),
            P_avail=float(self.P_avail[i]),
            S=float(self.S[i]),
            tau=float(self.tau[i]),
            tau_mode=self.tau_mode,
        )

    def consumed_nonneg(self):
        return pw.consumed_power_nonneg(self.P_lin, self.P_rot, self.P_res, self.P_base)

    def to_csv(self, path):
        header = "t,P_lin,P_rot,P_res,P_base,P_cons,P_avail"
        cols = np.column_stack(
            [self.times, self.P_lin, self.P_rot, self.P_res, self.P_base, self.P_cons, self.P_avail]
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in cols:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


@dataclass
class PlanResult:
    trajectory: SplineTrajectorySE2
    profile: PowerProfile
    objective_terms: dict
    P_pmax: float
    budget_margin: float
    wait_time_inserted: float
    converged: bool
    iterations: dict
    diagnostics: dict = field(default_factory=dict)

    def metrics_dict(self):
        return {
            "P_pmax": self.P_pmax,
            "budget_margin": self.budget_margin,
            "wait_time_inserted": self.wait_time_inserted,
            "objective_terms": {k: float(v) for k, v in self.objective_terms.items()},
            "converged": self.converged,
            "iterations": self.iterations,
        }


# -- decision-variable parameterization -------------------------------------------


class SplineProblem:
    """Maps the flat decision vector to spline boundary data and back.

    Layout: one (x, y, vx, vy, ax, ay) block per interior joint, then one
    log-duration per segment.  Endpoints are pinned to the start/goal
    positions with zero velocity and acceleration.
    """

    def __init__(self, start_xy, goal_xy, n_segments):
        self.start = np.asarray(start_xy, dtype=float).reshape(2)
        self.goal = np.asarray(goal_xy, dtype=float).reshape(2)
        self.n_segments = int(n_segments)
        self.n_joints = self.n_segments - 1
        self.n_vars = 6 * self.n_joints + self.n_segments

    def pack(self, traj):
        """Decision vector reproducing a trajectory with matching segment count."""
        if len(traj.segments) != self.n_segments:
            raise ValueError("segment count mismatch")
        z = np.empty(self.n_vars)
        for k in range(self.n_joints):
            cx = traj.segments[k + 1].coeffs_x
            cy = traj.segments[k + 1].coeffs_y
            z[6 * k: 6 * k + 6] = (cx[0], cy[0], cx[1], cy[1], 2.0 * cx[2], 2.0 * cy[2])
        z[6 * self.n_joints:] = [math.log(s.duration) for s in traj.segments]
        return z

    def unpack(self, z):
        joints = np.asarray(z[: 6 * self.n_joints], dtype=float).reshape(self.n_joints, 6)
        T = np.exp(np.asarray(z[6 * self.n_joints:], dtype=float))
        return joints, T

    def node_states(self, joints):
        """Arrays (n+1, 6) of (x, y, vx, vy, ax, ay) at all nodes."""
        nodes = np.zeros((self.n_segments + 1, 6))
        nodes[0, 0:2] = self.start
        nodes[-1, 0:2] = self.goal
        if self.n_joints:
            nodes[1:-1] = joints
        return nodes

    def boundary_vectors(self, joints):
        """Per-segment Hermite boundary vectors b_x, b_y (each (n, 6))."""
        nodes = self.node_states(joints)
        bx = np.empty((self.n_segments, 6))
        by = np.empty((self.n_segments, 6))
        for i in range(self.n_segments):
            bx[i] = (nodes[i, 0], nodes[i, 2], nodes[i, 4], nodes[i + 1, 0], nodes[i + 1, 2], nodes[i + 1, 4])
            by[i] = (nodes[i, 1], nodes[i, 3], nodes[i, 5], nodes[i + 1, 1], nodes[i + 1, 3], nodes[i + 1, 5])
        return bx, by

    def build(self, z, rest_yaw=0.0):
        joints, T = self.unpack(z)
        bx, by = self.boundary_vectors(joints)
        segs = []
        for i in range(self.n_segments):
            H = hermite_matrix(T[i])
            segs.append(SplineSegment(H @ bx[i], H @ by[i], T[i]))
        return SplineTrajectorySE2(segs, rest_yaw=rest_yaw)

    def scatter(self, d_bx, d_by, d_T):
        """Fold per-segment boundary/duration gradients into the variable vector."""
        node_grad = np.zeros((self.n_segments + 1, 6))
        for i in range(self.n_segments):
            node_grad[i, 0] += d_bx[i][0]
            node_grad[i, 2] += d_bx[i][1]
            node_grad[i, 4] += d_bx[i][2]
            node_grad[i + 1, 0] += d_bx[i][3]
            node_grad[i + 1, 2] += d_bx[i][4]
            node_grad[i + 1, 4] += d_bx[i][5]
            node_grad[i, 1] += d_by[i][0]
            node_grad[i, 3] += d_by[i][1]
            node_grad[i, 5] += d_by[i][2]
            node_grad[i + 1, 1] += d_by[i][3]
            node_grad[i + 1, 3] += d_by[i][4]
            node_grad[i + 1, 5] += d_by[i][5]
        grad = np.empty(self.n_vars)
        grad[: 6 * self.n_joints] = node_grad[1:-1].reshape(-1)
        grad[6 * self.n_joints:] = d_T  # caller already applied the log chain
        return grad


# -- augmented-Lagrangian state ------------------------------------------------------

_FAMILIES = ("power", "vx", "ax", "ay")


class _ALState:
    """Per-family penalty scales and per-sample multipliers."""

    def __init__(self, n_samples):
        self.scale = {f: 1.0 for f in _FAMILIES}
        self.lam = {f: np.zeros(n_samples) for f in _FAMILIES}
        self.prev_violation = {f: math.inf for f in _FAMILIES}


def _kin_sharpness(bound):
    return 10.0 / bound


_BOUNDARY_SHARPNESS_CELLS = 2.0  # softplus wall, in units of 1/cell
_BOUNDARY_WEIGHT = 1e3


# -- objective ------------------------------------------------------------------------


def _objective(z, problem, config, terrain, params, state=None):
    """Objective value, gradient over decision variables, and term breakdown.

    ``state`` supplies augmented-Lagrangian multipliers/scales; None means the
    plain penalty objective (base weights, zero multipliers).
    """
    n = problem.n_segments
    K = config.samples_per_segment
    joints, T = problem.unpack(z)
    bxs, bys = problem.boundary_vectors(joints)

    theta = np.linspace(0.0, 1.0, K)
    tw = np.full(K, 1.0 / (K - 1))
    tw[0] = tw[-1] = 0.5 / (K - 1)

    Hs = [hermite_matrix(T[i]) for i in range(n)]
    dHs = [hermite_matrix_dT(T[i]) for i in range(n)]
    cxs = np.stack([Hs[i] @ bxs[i] for i in range(n)])
    cys = np.stack([Hs[i] @ bys[i] for i in range(n)])

    # jerk + time terms (closed form)
    J_jerk = 0.0
    d_cx = np.zeros((n, 6))
    d_cy = np.zeros((n, 6))
    d_T = np.full(n, config.rho_T)  # d(rho_T * sum T)/dT
    J_time = config.rho_T * float(np.sum(T))
    for i in range(n):
        E, gx, gy, gT = jerk_energy_segment(cxs[i], cys[i], T[i])
        J_jerk += E
        d_cx[i, 3:] += gx
        d_cy[i, 3:] += gy
        d_T[i] += gT

    # sample kinematics, shape (n, K)
    bases = [polynomial_basis(theta * T[i]) for i in range(n)]  # each (5, K, 6)
    q = {}
    for name, d in (("x", 0), ("v", 1), ("a", 2), ("j", 3), ("s", 4)):
        q[name + "x"] = np.stack([bases[i][d] @ cxs[i] for i in range(n)])
        q[name + "y"] = np.stack([bases[i][d] @ cys[i] for i in range(n)])
    xs, ys = q["xx"], q["xy"]
    vx, vy = q["vx"], q["vy"]
    ax, ay = q["ax"], q["ay"]
    jx, jy = q["jx"], q["jy"]
    sx, sy = q["sx"], q["sy"]

    v = np.hypot(vx, vy)
    moving = v >= EPS_V
    v_safe = np.where(moving, v, 1.0)
    psi = np.where(moving, np.arctan2(vy, vx), 0.0)
    v2 = v_safe * v_safe
    omega = np.where(moving, (vx * ay - vy * ax) / v2, 0.0)
    domega = np.where(
        moving,
        (vx * jy - vy * jx) / v2 - 2.0 * omega * (vx * ax + vy * ay) / v2,
        0.0,
    )

    # terrain queries on positions clamped to the map (a softplus wall keeps
    # iterates inside; the final trajectory is re-validated unclamped)
    xlo, xhi = terrain.x_bounds
    ylo, yhi = terrain.y_bounds
    xq = np.clip(xs.ravel(), xlo, xhi)
    yq = np.clip(ys.ravel(), ylo, yhi)
    phi_f, dphi_f = terrain.pitch_along_heading(xq, yq, psi.ravel())
    xi_f, dxi_f = terrain.attitude_angle(xq, yq)
    risk_f, drisk_f = terrain.risk_density(xq, yq)
    phi = phi_f.reshape(n, K)
    dphi = dphi_f.reshape(3, n, K)
    xi = xi_f.reshape(n, K)
    dxi = dxi_f.reshape(2, n, K)
    risk = risk_f.reshape(n, K)
    drisk = drisk_f.reshape(2, n, K)

    w = tw[None, :] * T[:, None]  # quadrature weights, (n, K)

    fields = pw.power_fields(vx, vy, ax, ay, psi, omega, domega, phi, xi,
                             params, tau_mode=config.tau_mode)
    grads = pw.power_gradients(vx, vy, ax, ay, psi, omega, domega, phi, xi, params)

    # accumulators for per-sample partials
    dd = {k: np.zeros((n, K)) for k in
          ("x", "y", "vx", "vy", "ax", "ay", "jx", "jy", "psi", "omega", "domega",
           "phi", "xi", "vnorm")}
    integrand = np.zeros((n, K))  # d(w_ij * f_ij)/dT_i weight chain

    def add_samples(weighted, coef, key):
        dd[key] += np.where(moving, coef, 0.0) * weighted

    # risk path integral: rho_r * sum w * r * v
    r_term = np.where(moving, risk * v, 0.0)
    J_risk = config.rho_r * float(np.sum(w * r_term))
    integrand += config.rho_r * r_term
    wr = config.rho_r * w
    add_samples(wr, drisk[0] * v, "x")
    add_samples(wr, drisk[1] * v, "y")
    add_samples(wr, risk * vx / v_safe, "vx")
    add_samples(wr, risk * vy / v_safe, "vy")

    # constraint families: power cap and kinematic bounds
    s_pow = params.omega_E * (state.scale["power"] if state else 1.0)
    lam_pow = state.lam["power"].reshape(n, K) if state else 0.0
    kappa = params.kappa
    z_pow = fields["z"]
    sp = softplus(z_pow, kappa)
    sig = expit(kappa * z_pow)
    pen_base = np.where(moving, sp * sp, 0.0)
    J_power_base = params.omega_E * float(np.sum(w * pen_base))
    J_power = s_pow * float(np.sum(w * pen_base))
    lam_term = np.where(moving, lam_pow * sp, 0.0) if state else 0.0
    J_power_lam = float(np.sum(w * lam_term)) if state else 0.0
    integrand += s_pow * pen_base + (lam_term if state else 0.0)
    dpen_dz = (2.0 * s_pow * sp + lam_pow) * sig  # d/dz of scaled + multiplier terms

    dJdPlin = dpen_dz * fields["P_lin"] / np.where(fields["S"] > 0, fields["S"], 1.0)
    dJdProt = dpen_dz * fields["P_rot"] / np.where(fields["S"] > 0, fields["S"], 1.0)
    if config.tau_mode == "literal":
        dJdPlin = dJdPlin + dpen_dz
        dJdProt = dJdProt + dpen_dz
    dJdPres = dpen_dz  # z rises one-for-one with P_res in both tau modes

    add_samples(w, dJdPlin * grads["dlin_dvx"], "vx")
    add_samples(w, dJdPlin * grads["dlin_dvy"], "vy")
    add_samples(w, dJdPlin * grads["dlin_dax"], "ax")
    add_samples(w, dJdPlin * grads["dlin_day"], "ay")
    add_samples(w, dJdPlin * grads["dlin_dpsi"], "psi")
    add_samples(w, dJdPlin * grads["dlin_dphi"], "phi")
    add_samples(w, dJdProt * grads["drot_domega"], "omega")
    add_samples(w, dJdProt * grads["drot_ddomega"], "domega")
    add_samples(w, dJdProt * grads["drot_dxi"], "xi")

    c_phi = np.cos(phi)
    s_phi = np.sin(phi)
    x_B = fields["x_B"]
    dPres_dxB = params.C0 + 2.0 * params.C1 * np.abs(x_B) + 3.0 * params.C2 * x_B * x_B
    add_samples(w, dJdPres * dPres_dxB / c_phi, "vnorm")
    add_samples(w, dJdPres * dPres_dxB * v * s_phi / (c_phi * c_phi), "phi")

    # kinematic bounds via the same squared-softplus machinery
    J_kin = 0.0
    kin_specs = []
    a_long = fields["a"]
    a_B = a_long / c_phi
    c_xi = np.cos(xi)
    y_B2 = omega * v / (c_xi * c_phi)  # centripetal lateral acceleration
    kin_specs.append(("vx", x_B - config.vx_B_max, {
        "vnorm": 1.0 / c_phi,
        "phi": v * s_phi / (c_phi * c_phi),
    }))
    sgn_a = np.sign(a_B)
    kin_specs.append(("ax", np.abs(a_B) - config.ax_B_max, {
        "ax": sgn_a * np.cos(psi) / c_phi,
        "ay": sgn_a * np.sin(psi) / c_phi,
        "psi": sgn_a * fields["b"] / c_phi,
        "phi": sgn_a * a_long * s_phi / (c_phi * c_phi),
    }))
    sgn_y = np.sign(y_B2)
    kin_specs.append(("ay", np.abs(y_B2) - config.ay_B_max, {
        "omega": sgn_y * v / (c_xi * c_phi),
        "vnorm": sgn_y * omega / (c_xi * c_phi),
        "xi": sgn_y * omega * v * np.sin(xi) / (c_xi * c_xi * c_phi),
        "phi": sgn_y * omega * v * s_phi / (c_xi * c_phi * c_phi),
    }))
    bounds = {"vx": config.vx_B_max, "ax": config.ax_B_max, "ay": config.ay_B_max}
    for fam, g, chains in kin_specs:
        kf = _kin_sharpness(bounds[fam])
        s_fam = config.kin_weight * (state.scale[fam] if state else 1.0)
        lam_f = state.lam[fam].reshape(n, K) if state else 0.0
        sp_f = softplus(g, kf)
        sig_f = expit(kf * g)
        pen_f = np.where(moving, sp_f * sp_f, 0.0)
        lam_t = np.where(moving, lam_f * sp_f, 0.0) if state else 0.0
        J_fam = s_fam * float(np.sum(w * pen_f)) + (float(np.sum(w * lam_t)) if state else 0.0)
        J_kin += J_fam
        integrand += s_fam * pen_f + (lam_t if state else 0.0)
        dpen = (2.0 * s_fam * sp_f + lam_f) * sig_f
        for key, coef in chains.items():
            add_samples(w, dpen * coef, key)

    # soft wall keeping samples on the map (active only near the border)
    kb = _BOUNDARY_SHARPNESS_CELLS / terrain.cell_size
    J_wall = 0.0
    for arr, lo, hi, key in ((xs, xlo, xhi, "x"), (ys, ylo, yhi, "y")):
        for gwall, sign in ((arr - hi, 1.0), (lo - arr, -1.0)):
            spw = softplus(gwall, kb)
            J_wall += _BOUNDARY_WEIGHT * float(np.sum(w * spw * spw))
            integrand += _BOUNDARY_WEIGHT * spw * spw
            dd[key] += w * sign * 2.0 * _BOUNDARY_WEIGHT * spw * expit(kb * gwall)

    # pull yaw-quantity partials back to velocity/acceleration/jerk partials
    dpsi_p, domg_p, ddomg_p = yaw_rate_partials(vx, vy, ax, ay, jx, jy)
    stack = (
        dd["psi"][None] * dpsi_p
        + dd["omega"][None] * domg_p
        + dd["domega"][None] * ddomg_p
    )
    stack = np.where(moving[None], stack, 0.0)
    for idx, key in enumerate(("vx", "vy", "ax", "ay", "jx", "jy")):
        dd[key] += stack[idx]

    # terrain chains and the speed-norm chain
    dd["x"] += dd["phi"] * dphi[0] + dd["xi"] * dxi[0]
    dd["y"] += dd["phi"] * dphi[1] + dd["xi"] * dxi[1]
    psi_extra = dd["phi"] * dphi[2]
    extra = (
        psi_extra[None] * dpsi_p
    )
    extra = np.where(moving[None], extra, 0.0)
    dd["vx"] += extra[0]
    dd["vy"] += extra[1]
    dd["vx"] += np.where(moving, dd["vnorm"] * vx / v_safe, 0.0)
    dd["vy"] += np.where(moving, dd["vnorm"] * vy / v_safe, 0.0)

    # map per-sample partials onto coefficients and durations
    for i in range(n):
        B = bases[i]
        d_cx[i] += (
            dd["x"][i] @ B[0] + dd["vx"][i] @ B[1] + dd["ax"][i] @ B[2] + dd["jx"][i] @ B[3]
        )
        d_cy[i] += (
            dd["y"][i] @ B[0] + dd["vy"][i] @ B[1] + dd["ay"][i] @ B[2] + dd["jy"][i] @ B[3]
        )
        d_T[i] += float(
            np.sum(
                theta
                * (
                    dd["x"][i] * vx[i]
                    + dd["vx"][i] * ax[i]
                    + dd["ax"][i] * jx[i]
                    + dd["jx"][i] * sx[i]
                    + dd["y"][i] * vy[i]
                    + dd["vy"][i] * ay[i]
                    + dd["ay"][i] * jy[i]
                    + dd["jy"][i] * sy[i]
                )
            )
        )
        d_T[i] += float(np.sum(tw * integrand[i]))  # quadrature-weight chain

    # boundary-value and duration gradients
    d_bx = np.empty((n, 6))
    d_by = np.empty((n, 6))
    for i in range(n):
        d_bx[i] = Hs[i].T @ d_cx[i]
        d_by[i] = Hs[i].T @ d_cy[i]
        d_T[i] += float(d_cx[i] @ (dHs[i] @ bxs[i]) + d_cy[i] @ (dHs[i] @ bys[i]))

    grad = problem.scatter(d_bx, d_by, d_T * T)  # log-duration chain

    J = J_jerk + J_time + J_risk + J_power + J_power_lam + J_kin + J_wall
    terms = {
        "jerk": J_jerk,
        "time": J_time,
        "risk": J_risk,
        "power_penalty": J_power_base,
        "kinematic_penalty": J_kin,
    }
    return J, grad, terms


def objective_and_gradient(z, problem, config, terrain, params):
    """Plain penalty objective and analytic gradient (no multiplier state)."""
    J, grad, _ = _objective(z, problem, config, terrain, params, state=None)
    return J, grad


# -- profile evaluation ---------------------------------------------------------------


def evaluate_profile(traj, terrain, params, dt=0.1, tau_mode="headroom"):
    """Sample power along a trajectory at resolution dt plus segment joints."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = np.arange(traj.t0, traj.t_end, dt)
    starts = traj.segment_start_times()
    # pre-joint samples let the trapezoid rule integrate step changes (e.g.
    # wait-to-motion transitions) exactly to within a nanosecond sliver
    pre = starts[1:] - 1e-9
    pre = pre[pre > traj.t0]
    times = np.unique(np.concatenate([grid, starts, pre, [traj.t_end]]))
    samples = [traj.evaluate(t) for t in times]
    for t, s in zip(times, samples):
        if not terrain.contains(s.x, s.y):
            raise TerrainBoundsError(
                f"trajectory leaves terrain bounds at t = {t:.6g} "
                f"(position {s.x:.6g}, {s.y:.6g})"
            )
    xs = np.array([s.x for s in samples])
    ys = np.array([s.y for s in samples])
    psis = np.array([s.psi for s in samples])
    phi, _ = terrain.pitch_along_heading(xs, ys, psis)
    xi, _ = terrain.attitude_angle(xs, ys)
    f = pw.power_fields(
        np.array([s.vx for s in samples]),
        np.array([s.vy for s in samples]),
        np.array([s.ax for s in samples]),
        np.array([s.ay for s in samples]),
        psis,
        np.array([s.omega for s in samples]),
        np.array([s.domega for s in samples]),
        phi,
        xi,
        params,
        tau_mode=tau_mode,
    )
    base = np.full(len(times), params.P_base)
    return PowerProfile(
        times=times,
        P_lin=f["P_lin"],
        P_rot=f["P_rot"],
        P_res=f["P_res"],
        P_base=base,
        P_cons=f["P_cons"],
        P_avail=np.asarray(f["P_avail"], dtype=float),
        S=f["S"],
        tau=f["tau"],
        dt=dt,
        tau_mode=tau_mode,
    )


def _cumulative_trapezoid(times, values):
    inc = 0.5 * (values[1:] + values[:-1]) * np.diff(times)
    return np.concatenate([[0.0], np.cumsum(inc)])


def _budget_margin(profile):
    cons = profile.consumed_nonneg()
    e_cons = _cumulative_trapezoid(profile.times, cons)[-1]
    e_avail = _cumulative_trapezoid(profile.times, profile.P_avail)[-1]
    return float(e_avail - e_cons)


# -- violation measurement ---------------------------------------------------------


def _kinematic_quantities(traj, terrain, times):
    """Body-frame velocity and acceleration magnitudes at the given times."""
    x_B = np.zeros(len(times))
    a_B = np.zeros(len(times))
    y_B2 = np.zeros(len(times))
    for k, t in enumerate(times):
        s = traj.evaluate(t)
        phi, _ = terrain.pitch_along_heading(s.x, s.y, s.psi)
        xi, _ = terrain.attitude_angle(s.x, s.y)
        c = math.cos(phi)
        x_B[k] = s.speed / c
        a_long = s.ax * math.cos(s.psi) + s.ay * math.sin(s.psi)
        a_B[k] = a_long / c
        y_B2[k] = (s.omega / math.cos(xi)) * x_B[k]
    return x_B, a_B, y_B2


def _violations(traj, profile, terrain, params, config):
    x_B, a_B, y_B2 = _kinematic_quantities(traj, terrain, profile.times)
    cap = params.effective_limit
    return {
        "power": float(np.max(profile.P_cons) - cap),
        "vx": float(np.max(x_B) - config.vx_B_max),
        "ax": float(np.max(np.abs(a_B)) - config.ax_B_max),
        "ay": float(np.max(np.abs(y_B2)) - config.ay_B_max),
    }


def _tolerances(params, config):
    return {
        "power": config.constraint_tol * params.effective_limit,
        "vx": 2.0 * config.constraint_tol * config.vx_B_max,
        "ax": 2.0 * config.constraint_tol * config.ax_B_max,
        "ay": 2.0 * config.constraint_tol * config.ay_B_max,
    }


# -- main entry points ----------------------------------------------------------------


def _result_for_trajectory(traj, terrain, params, config, converged, iterations, diagnostics, terms=None):
    profile = evaluate_profile(traj, terrain, params, dt=config.profile_dt,
                               tau_mode=config.tau_mode)
    return PlanResult(
        trajectory=traj,
        profile=profile,
        objective_terms=terms or {"jerk": 0.0, "time": config.rho_T * traj.duration,
                                  "risk": 0.0, "power_penalty": 0.0,
                                  "kinematic_penalty": 0.0},
        P_pmax=float(np.max(profile.P_cons)),
        budget_margin=_budget_margin(profile),
        wait_time_inserted=0.0,
        converged=converged,
        iterations=iterations,
        diagnostics=diagnostics,
    )


def plan(start, goal, terrain, params, config):
    """Plan a power-feasible trajectory between two poses.

    Runs the augmented-Lagrangian outer loop over the smooth penalized
    objective.  The returned result flags convergence honestly: it is set
    only when every constraint violation is inside its tolerance.
    """
    guess = initial_guess(start, goal, terrain,
                          n_segments=config.n_segments, v_nominal=config.nominal_speed)
    if not guess.has_motion():
        return _result_for_trajectory(
            guess, terrain, params, config, converged=True,
            iterations={"outer": 0, "inner": 0}, diagnostics={"violations": []},
        )

    problem = SplineProblem(start[:2], goal[:2], config.n_segments)
    z = problem.pack(guess)
    state = _ALState(config.n_segments * config.samples_per_segment)
    tols = _tolerances(params, config)
    active = {
        "power": params.omega_E > 0.0,
        "vx": config.kin_weight > 0.0,
        "ax": config.kin_weight > 0.0,
        "ay": config.kin_weight > 0.0,
    }

    best = None  # (score, z, violations)
    history = []
    inner_total = 0
    converged = False
    outer_done = 0
    rest_yaw = guess.rest_yaw

    for outer in range(config.max_outer_iters):
        res = minimize(
            lambda zz: _objective(zz, problem, config, terrain, params, state)[:2],
            z,
            jac=True,
            method="L-BFGS-B",
            options={
                "maxiter": config.max_inner_iters,
                "gtol": config.grad_tol,
                "ftol": 1e-12,
            },
        )
        z = res.x
        inner_total += int(res.nit)
        outer_done = outer + 1

        traj = problem.build(z, rest_yaw=rest_yaw)
        profile = evaluate_profile(traj, terrain, params, dt=config.profile_dt,
                                   tau_mode=config.tau_mode)
        viol = _violations(traj, profile, terrain, params, config)
        score = max(
            (viol[f] / tols[f] for f in _FAMILIES if active[f]), default=0.0
        )
        # accepted iterates never worsen the power violation (then the
        # overall relative violation breaks ties)
        key = (max(viol["power"], 0.0) if active["power"] else 0.0, score)
        if best is None or key <= best[0]:
            best = (key, z.copy(), viol)
            history.append({f: viol[f] for f in _FAMILIES})
        if all((not active[f]) or viol[f] <= tols[f] for f in _FAMILIES):
            converged = True
            break

        # multiplier and penalty-scale updates on the optimizer sample grid
        J_, _, _ = _objective(z, problem, config, terrain, params, state)
        sample_g = _sample_constraints(z, problem, config, terrain, params)
        for f in _FAMILIES:
            if not active[f] or viol[f] <= tols[f]:
                continue
            base_w = params.omega_E if f == "power" else config.kin_weight
            kf = params.kappa if f == "power" else _kin_sharpness(
                {"vx": config.vx_B_max, "ax": config.ax_B_max, "ay": config.ay_B_max}[f]
            )
            spv = np.asarray(softplus(sample_g[f], kf))
            state.lam[f] = np.maximum(
                state.lam[f] + 2.0 * base_w * state.scale[f] * spv.ravel(), 0.0
            )
            if viol[f] > 0.5 * state.prev_violation[f]:
                state.scale[f] *= 5.0
            state.prev_violation[f] = viol[f]
        del J_

    if best is None:
        raise RuntimeError("planner produced no iterate")
    z = best[1]
    traj = problem.build(z, rest_yaw=rest_yaw)
    _, _, terms = _objective(z, problem, config, terrain, params, state=None)
    result = _result_for_trajectory(
        traj, terrain, params, config, converged=converged,
        iterations={"outer": outer_done, "inner": inner_total},
        diagnostics={"violations": history, "final_violations": best[2],
                     "tolerances": tols},
        terms=terms,
    )
    return result


def _sample_constraints(z, problem, config, terrain, params):
    """Constraint values g on the optimizer sample grid, keyed by family."""
    traj = problem.build(z)
    n, K = problem.n_segments, config.samples_per_segment
    theta = np.linspace(0.0, 1.0, K)
    out = {f: np.full((n, K), -np.inf) for f in _FAMILIES}
    starts = traj.segment_start_times()
    for i in range(n):
        T = traj.segments[i].duration
        times = starts[i] + theta * T
        for k, t in enumerate(times):
            s = traj.evaluate(t)
            if s.speed < EPS_V:
                continue
            if not terrain.contains(s.x, s.y):
                continue
            phi, _ = terrain.pitch_along_heading(s.x, s.y, s.psi)
            xi, _ = terrain.attitude_angle(s.x, s.y)
            f = pw.power_fields(s.vx, s.vy, s.ax, s.ay, s.psi, s.omega, s.domega,
                                phi, xi, params, tau_mode=config.tau_mode)
            out["power"][i, k] = float(f["z"])
            c = math.cos(phi)
            out["vx"][i, k] = s.speed / c - config.vx_B_max
            a_long = s.ax * math.cos(s.psi) + s.ay * math.sin(s.psi)
            out["ax"][i, k] = abs(a_long / c) - config.ax_B_max
            out["ay"][i, k] = abs((s.omega / math.cos(xi)) * s.speed / c) - config.ay_B_max
    for f in _FAMILIES:
        out[f] = np.where(np.isfinite(out[f]), out[f], -1e6)
    return out


def _profile_with_wait_prefix(profile, wait, params, config):
    """Exact profile of a wait-prefixed trajectory: a rest block, then the
    original samples shifted by the wait duration (time-shift identity)."""
    t0 = profile.times[0]
    wait_grid = np.arange(0.0, wait, profile.dt)
    offsets = np.unique(np.concatenate([wait_grid, [wait - 1e-9]]))
    offsets = offsets[(offsets >= 0.0) & (offsets < wait)]
    wt = t0 + offsets  # the joint itself comes from the shifted block
    nw = len(wt)
    zeros = np.zeros(nw)
    base = np.full(nw, params.P_base)
    cap = params.effective_limit
    p_avail = params.P_RTG + params.P_solar
    times = np.concatenate([wt, profile.times + wait])
    return PowerProfile(
        times=times,
        P_lin=np.concatenate([zeros, profile.P_lin]),
        P_rot=np.concatenate([zeros, profile.P_rot]),
        P_res=np.concatenate([zeros, profile.P_res]),
        P_base=np.concatenate([base, profile.P_base]),
        P_cons=np.concatenate([base, profile.P_cons]),
        P_avail=np.concatenate([np.full(nw, p_avail), profile.P_avail]),
        S=np.concatenate([zeros, profile.S]),
        tau=np.concatenate([np.full(nw, cap - params.P_base), profile.tau]),
        dt=profile.dt,
        tau_mode=profile.tau_mode,
    )


def enforce_energy_budget(result, params, config):
    """Ensure cumulative consumption never exceeds cumulative availability.

    If the plan overdraws the budget, a wait segment is prepended so the
    constant RTG+solar surplus (above base load) banks the worst cumulative
    shortfall before motion starts.  The shortfall is measured as the worst
    cumulative overdraw at any profile sample, so the banked-energy invariant
    holds at every instant, not just at the final time.
    """
    profile = result.profile
    cons = profile.consumed_nonneg()
    e_cons = _cumulative_trapezoid(profile.times, cons)
    e_avail = _cumulative_trapezoid(profile.times, profile.P_avail)
    shortfall = float(np.max(e_cons - e_avail)) - config.e_bank0
    if shortfall <= 1e-12:
        return result

    p_avail = params.P_RTG + params.P_solar
    surplus = p_avail - params.P_base
    if surplus <= 0.0:
        raise InfeasibleBudgetError(
            f"energy deficit of {shortfall:.6g} J cannot be recovered by waiting: "
            f"available power {p_avail:.6g} W does not exceed base load "
            f"{params.P_base:.6g} W"
        )
    wait = shortfall / surplus
    traj = result.trajectory.with_wait_prefix(wait)
    profile = _profile_with_wait_prefix(profile, wait, params, config)

    cons = pw.consumed_power_nonneg(profile.P_lin, profile.P_rot, profile.P_res, profile.P_base)
    bank = _cumulative_trapezoid(profile.times, profile.P_avail) - _cumulative_trapezoid(
        profile.times, cons
    ) + config.e_bank0
    tol = 1e-6 * max(1.0, float(_cumulative_trapezoid(profile.times, profile.P_avail)[-1]))
    if float(np.min(bank)) < -tol:
        raise InfeasibleBudgetError(
            f"cumulative budget still violated by {-float(np.min(bank)):.6g} J after waiting"
        )
    return PlanResult(
        trajectory=traj,
        profile=profile,
        objective_terms=result.objective_terms,
        P_pmax=float(np.max(profile.P_cons)),
        budget_margin=_budget_margin(profile),
        wait_time_inserted=wait,
        converged=result.converged,
        iterations=result.iterations,
        diagnostics=result.diagnostics,
    )
