import math

import numpy as np
import pytest

from roverplan.errors import DegenerateStateError, ProfileSpanError
from roverplan import power
from roverplan.power import (
    MotionState,
    PowerParams,
    available_power,
    motion_power,
    motion_power_gradient,
    power_penalty,
    resistive_power_gradient,
    softplus,
)


def params(**kw):
    base = dict(m=150.0, I_z=30.0, g=1.62, C0=0.0, C1=0.0, C2=0.0,
                P_base=100.0, P_RTG=110.0, P_solar=90.0, omega_E=1.0, kappa=0.05)
    base.update(kw)
    return PowerParams(**base)


# -- parameter validation and serialization --------------------------------------


def test_params_validation():
    with pytest.raises(ValueError):
        PowerParams(m=-1.0)
    with pytest.raises(ValueError):
        PowerParams(kappa=0.0)
    with pytest.raises(ValueError):
        PowerParams(C1=-0.1)


def test_params_json_roundtrip():
    p = params(P_limit=200.0)
    q = PowerParams.from_json_dict(p.to_json_dict())
    assert p == q


def test_params_json_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown"):
        PowerParams.from_json_dict({"m": 10.0, "battery_Wh": 500.0})


def test_effective_limit_defaults_to_supply():
    assert params().effective_limit == 200.0
    assert params(P_limit=150.0).effective_limit == 150.0


def test_motion_state_validates_angles():
    with pytest.raises(ValueError):
        MotionState(phi=math.pi / 2)
    with pytest.raises(ValueError):
        MotionState(xi=-math.pi / 2)


# -- motion power: frozen hand evaluations ----------------------------------------


def test_rest_state_consumes_base_only():
    bd = motion_power(MotionState(), params())
    assert bd.P_lin == 0.0 and bd.P_rot == 0.0 and bd.P_res == 0.0
    assert bd.P_cons == 100.0
    assert bd.P_avail == 200.0


def test_plin_flat_acceleration():
    bd = motion_power(MotionState(vx_G=0.5, ax_G=0.2), params())
    assert bd.P_lin == pytest.approx(15.0, rel=1e-12)


def test_plin_lunar_slope():
    # sin(phi) = 0.1, v_G = 0.5, a = 0: P_lin = 150*1.62*0.1*(0.5/cos phi)
    bd = motion_power(MotionState(vx_G=0.5, phi=math.asin(0.1)), params())
    assert bd.P_lin == pytest.approx(12.211209455399429, rel=1e-12)


def test_prot():
    bd = motion_power(MotionState(omega_G=0.2, domega_G=0.1), params())
    assert bd.P_rot == pytest.approx(0.6, rel=1e-12)


def test_pres():
    bd = motion_power(MotionState(vx_G=0.5), params(C0=5.0, C1=2.0, C2=0.0))
    assert bd.P_res == pytest.approx(3.0, rel=1e-12)


def test_decomposition_bitwise():
    rng = np.random.default_rng(0)
    p = params(C0=5.0, C1=2.0, C2=0.5)
    for _ in range(50):
        st = MotionState(*rng.uniform(-1, 1, 7), phi=rng.uniform(-0.5, 0.5),
                         xi=abs(rng.uniform(0, 0.5)))
        bd = motion_power(st, p)
        assert bd.P_cons == ((bd.P_lin + bd.P_rot) + bd.P_res) + bd.P_base


def test_flat_reduction_matches_planar_formulas():
    rng = np.random.default_rng(1)
    p = params(C0=3.0, C1=1.0, C2=0.2)
    for _ in range(50):
        vx, vy, ax, ay = rng.uniform(-1, 1, 4)
        psi = math.atan2(vy, vx)
        omega, domega = rng.uniform(-1, 1, 2)
        st = MotionState(vx, vy, ax, ay, psi, omega, domega, 0.0, 0.0)
        bd = motion_power(st, p)
        v = math.hypot(vx, vy)
        a_long = ax * math.cos(psi) + ay * math.sin(psi)
        assert bd.P_lin == pytest.approx(p.m * a_long * v, rel=1e-12, abs=1e-12)
        assert bd.P_rot == pytest.approx(p.I_z * domega * omega, rel=1e-12, abs=1e-12)


def test_mass_and_inertia_scaling():
    st = MotionState(vx_G=0.6, vy_G=0.2, ax_G=0.3, ay_G=-0.1, psi_G=0.4,
                     omega_G=0.3, domega_G=0.2, phi=0.1, xi=0.2)
    b1 = motion_power(st, params())
    b2 = motion_power(st, params(m=300.0))
    assert b2.P_lin == pytest.approx(2.0 * b1.P_lin, rel=1e-12)
    b3 = motion_power(st, params(I_z=60.0))
    assert b3.P_rot == pytest.approx(2.0 * b1.P_rot, rel=1e-12)


# -- gradients ---------------------------------------------------------------------


def _state_from_vec(vec, omega, domega, xi):
    vx, vy, ax, ay, psi, phi = vec
    return MotionState(vx, vy, ax, ay, psi, omega, domega, phi, xi)


def test_prot_gradient_zero_omega():
    g = motion_power_gradient(MotionState(vx_G=0.5, domega_G=0.3, xi=0.2), params())
    assert g.d_P_rot[1] == 0.0  # d/d domega = I_z * omega / cos xi
    assert g.d_P_rot[2] == 0.0


def test_plin_gradient_flat_zero_accel():
    p = params()
    st = MotionState(vx_G=0.7, vy_G=0.0, psi_G=0.0)
    g = motion_power_gradient(st, p)
    assert g.d_P_lin[5] == pytest.approx(p.m * 0.7 * p.g, rel=1e-12)


def test_gradient_rejects_rest():
    with pytest.raises(DegenerateStateError):
        motion_power_gradient(MotionState(), params())


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = params(C0=4.0, C1=2.0, C2=0.3)
    step = 1e-6
    for _ in range(200):
        vec = np.array([
            rng.uniform(0.05, 2.0) * math.cos(rng.uniform(-np.pi, np.pi)),
            rng.uniform(0.05, 2.0) * math.sin(rng.uniform(-np.pi, np.pi)),
            rng.uniform(-1, 1),
            rng.uniform(-1, 1),
            rng.uniform(-np.pi, np.pi),
            rng.uniform(-0.6, 0.6),
        ])
        if math.hypot(vec[0], vec[1]) < 0.05:
            continue
        omega, domega = rng.uniform(-1, 1, 2)
        xi = rng.uniform(0.0, 0.6)
        g = motion_power_gradient(_state_from_vec(vec, omega, domega, xi), p)
        for k in range(6):
            up, dn = vec.copy(), vec.copy()
            up[k] += step
            dn[k] -= step
            fd = (
                motion_power(_state_from_vec(up, omega, domega, xi), p).P_lin
                - motion_power(_state_from_vec(dn, omega, domega, xi), p).P_lin
            ) / (2 * step)
            assert abs(g.d_P_lin[k] - fd) <= 1e-5 * max(abs(fd), 1.0)
        for k, (dw, ddw, dxi) in enumerate(((step, 0, 0), (0, step, 0), (0, 0, step))):
            fd = (
                motion_power(_state_from_vec(vec, omega + dw, domega + ddw, xi + dxi), p).P_rot
                - motion_power(_state_from_vec(vec, omega - dw, domega - ddw, xi - dxi), p).P_rot
            ) / (2 * step)
            assert abs(g.d_P_rot[k] - fd) <= 1e-5 * max(abs(fd), 1.0)


def test_resistive_gradient_values():
    assert resistive_power_gradient(0.0, params(C0=5.0, C1=2.0, C2=1.0)) == 5.0
    assert resistive_power_gradient(0.5, params(C0=5.0, C1=2.0, C2=1.0)) == pytest.approx(7.75)


def test_resistive_gradient_matches_fd():
    p = params(C0=5.0, C1=2.0, C2=1.0)
    step = 1e-7

    def pres(v):
        return (p.C0 + p.C1 * abs(v) + p.C2 * v * v) * v

    for v in (0.2, 0.5, 1.4, 2.0):
        fd = (pres(v + step) - pres(v - step)) / (2 * step)
        assert resistive_power_gradient(v, p) == pytest.approx(fd, rel=1e-6)


# -- softplus penalty ---------------------------------------------------------------


def test_softplus_at_zero():
    assert softplus(0.0, 10.0) == pytest.approx(math.log(2) / 10.0, abs=1e-12)


def test_softplus_bounds_and_monotone():
    for kappa in (0.01, 0.05, 1.0):
        z = np.linspace(-400.0, 400.0, 4001)
        sp = softplus(z, kappa)
        relu = np.maximum(z, 0.0)
        assert np.all(sp >= relu - 1e-12)
        assert np.all(sp <= relu + math.log(2) / kappa + 1e-12)
        assert np.all(np.diff(sp) >= -1e-12)


def test_penalty_at_threshold():
    p = params(omega_E=1.0, kappa=10.0)
    bd = power.PowerBreakdown(
        P_lin=3.0, P_rot=4.0, P_res=0.0, P_base=0.0, P_cons=7.0,
        P_avail=200.0, S=5.0, tau=5.0,  # z = 0
    )
    pen = power_penalty(bd, p)
    assert pen.z == 0.0
    assert pen.value == pytest.approx(0.004804530139182014, rel=1e-12)
    # chain partials split the slope along (P_lin, P_rot)/S
    assert pen.d_P_lin == pytest.approx(pen.d_z * 3.0 / 5.0, rel=1e-12)
    assert pen.d_P_rot == pytest.approx(pen.d_z * 4.0 / 5.0, rel=1e-12)


def test_penalty_deep_feasible_tail():
    p = params(omega_E=1.0, kappa=0.05)
    z = -50.0 / p.kappa
    bd = power.PowerBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 200.0, S=0.0, tau=-z)
    pen = power_penalty(bd, p)
    assert pen.value <= (math.exp(p.kappa * z) / p.kappa) ** 2
    assert pen.value < 1e-40


def test_penalty_slope_matches_fd():
    p = params(omega_E=0.7, kappa=0.5)

    def j_of_z(z):
        return p.omega_E * softplus(z, p.kappa) ** 2

    for z in (-1.0, 0.0, 1.0, 10.0):
        step = 1e-6
        fd = (j_of_z(z + step) - j_of_z(z - step)) / (2 * step)
        bd = power.PowerBreakdown(1.0, 0.0, 0.0, 0.0, 1.0, 200.0, S=1.0, tau=1.0 - z)
        pen = power_penalty(bd, p)
        assert pen.d_z == pytest.approx(fd, rel=1e-6)


def test_penalty_zero_motion_partials():
    p = params()
    bd = power.PowerBreakdown(0.0, 0.0, 5.0, 100.0, 105.0, 200.0, S=0.0, tau=95.0)
    pen = power_penalty(bd, p)
    assert pen.d_P_lin == 0.0 and pen.d_P_rot == 0.0
    assert pen.d_z > 0.0  # resistive chain stays alive


def test_penalty_monotone_in_z():
    p = params()
    zs = np.linspace(-100, 100, 1001)
    js = p.omega_E * softplus(zs, p.kappa) ** 2
    assert np.all(np.diff(js) >= 0.0)


def test_tau_modes():
    p = params(C0=10.0)
    st = MotionState(vx_G=0.5, ax_G=0.2)
    head = motion_power(st, p, tau_mode="headroom")
    lit = motion_power(st, p, tau_mode="literal")
    assert head.tau == pytest.approx(p.effective_limit - (p.P_base + head.P_res))
    assert lit.tau == pytest.approx(p.effective_limit - lit.P_cons)
    with pytest.raises(ValueError):
        motion_power(st, p, tau_mode="banana")


# -- available power ------------------------------------------------------------------


def test_available_constant():
    p = params()
    assert available_power(0.0, p) == 200.0
    assert available_power(1e6, p) == 200.0


def test_available_zero_sources():
    p = params(P_RTG=0.0, P_solar=0.0)
    assert available_power(5.0, p) == 0.0


def test_available_table():
    p = params()
    table = [(0.0, 100.0), (10.0, 200.0)]
    assert available_power(5.0, p, profile=table) == pytest.approx(150.0)
    with pytest.raises(ProfileSpanError):
        available_power(11.0, p, profile=table)


# -- vectorized kernel agrees with the scalar path --------------------------------------


def test_batch_kernel_matches_scalar():
    rng = np.random.default_rng(3)
    p = params(C0=4.0, C1=1.5, C2=0.2)
    n = 32
    vx, vy, ax, ay = rng.uniform(-1, 1, (4, n))
    psi = rng.uniform(-np.pi, np.pi, n)
    omega, domega = rng.uniform(-1, 1, (2, n))
    phi = rng.uniform(-0.5, 0.5, n)
    xi = rng.uniform(0.0, 0.5, n)
    f = power.power_fields(vx, vy, ax, ay, psi, omega, domega, phi, xi, p)
    g = power.power_gradients(vx, vy, ax, ay, psi, omega, domega, phi, xi, p)
    for i in range(n):
        st = MotionState(vx[i], vy[i], ax[i], ay[i], psi[i], omega[i], domega[i], phi[i], xi[i])
        bd = motion_power(st, p)
        assert f["P_lin"][i] == pytest.approx(bd.P_lin, rel=1e-14, abs=1e-14)
        assert f["P_rot"][i] == pytest.approx(bd.P_rot, rel=1e-14, abs=1e-14)
        assert f["P_res"][i] == pytest.approx(bd.P_res, rel=1e-14, abs=1e-14)
        assert f["S"][i] == pytest.approx(bd.S, rel=1e-14, abs=1e-14)
        if st.v_G > 1e-3:
            gr = motion_power_gradient(st, p)
            assert g["dlin_dvx"][i] == pytest.approx(gr.d_P_lin[0], rel=1e-14)
            assert g["drot_dxi"][i] == pytest.approx(gr.d_P_rot[2], rel=1e-14)
