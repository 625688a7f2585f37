"""Dynamical checks: the integrator, rotation numbers, invariance residual.

These are the independent instruments that judge the iteration's output,
so their own error behavior gets pinned down here: exactness on linear
flows, fourth-order energy drift, detector sensitivity of the residual.
"""

import math

import numpy as np
import pytest

from hypertori.presets import example1
from hypertori.series import Series, add
from hypertori.verify import (
    Trajectory,
    integrate,
    invariance_residual,
    rotation_numbers,
    torus_flow,
)


def _full_hamiltonian(inst):
    return add(inst.normal_form.to_series(d_max=4, K_max=inst.P.K_max),
               inst.P)


# ---------------------------------------------------------------------------
# integrator


def test_constant_field_is_integrated_exactly():
    # H = <Omega, y> gives a constant vector field; RK4 reproduces the
    # straight-line flow to roundoff and conserves H identically
    inst = example1(eps=1e-4)
    S = inst.structure
    H = Series.from_terms(2, 1, 1, 2, 1, [((0, 0), (1,), (0, 0), 1.0)])
    state0 = np.array([0.0, 0.4, 1.1, 0.0, 0.0])
    tr = integrate(H, S, state0, T=2.0, dt=0.1)
    omega = S.toral_frequency(np.array([1.0]))
    expect_x = state0[1:3][None, :] + tr.times[:, None] * omega[None, :]
    np.testing.assert_allclose(tr.x, expect_x, atol=1e-13)
    np.testing.assert_allclose(tr.states[:, 0], 0.0, atol=1e-15)
    np.testing.assert_allclose(tr.states[:, 3:], 0.0, atol=1e-15)
    assert tr.energy_drift() == 0.0
    assert not tr.escaped


def test_hyperbolic_pair_exponents():
    # unperturbed preset: the z block decouples and flows under J[M],
    # a hyperbolic pair with exponents +1 and -1; the diagonal and
    # antidiagonal initial conditions pick out one branch each, and the
    # growing branch doubles in time ln 2
    inst = example1(eps=0.0)
    S = inst.structure
    H = inst.normal_form.to_series(d_max=4, K_max=1)
    delta = 1e-3

    rates = {}
    for tag, z0 in [("diag", (delta, delta)), ("anti", (delta, -delta))]:
        state0 = np.array([0.0, 0.3, 0.7, z0[0], z0[1]])
        tr = integrate(H, S, state0, T=2.0, dt=1e-3)
        amp = np.linalg.norm(tr.states[:, 3:], axis=1)
        slope = np.polyfit(tr.times, np.log(amp), 1)[0]
        rates[tag] = slope
    assert sorted(np.round(list(rates.values()), 6)) == [-1.0, 1.0]

    growing = "diag" if rates["diag"] > 0 else "anti"
    z0 = (delta, delta) if growing == "diag" else (delta, -delta)
    state0 = np.array([0.0, 0.3, 0.7, z0[0], z0[1]])
    tr = integrate(H, S, state0, T=2.0, dt=1e-3)
    amp = np.linalg.norm(tr.states[:, 3:], axis=1)
    i_double = int(np.argmax(amp >= 2.0 * amp[0]))
    assert tr.times[i_double] == pytest.approx(math.log(2.0), abs=2e-3)


def test_escape_guard_flags_hyperbolic_runaway():
    # a point 1e-3 off the torus leaves the guard ball well before T=50
    inst = example1(eps=1e-4)
    S = inst.structure
    H = _full_hamiltonian(inst)
    state0 = np.array([0.0, 0.3, 0.7, 1e-3, -1e-3])
    tr = integrate(H, S, state0, T=50.0, dt=0.01, guard=1e3)
    assert tr.escaped
    assert tr.escape_time < 50.0
    assert tr.times[-1] == tr.escape_time
    assert tr.states.shape[0] == tr.times.shape[0]
    assert tr.states.shape[0] < int(round(50.0 / 0.01)) + 1


def test_energy_drift_is_fourth_order():
    # strongly coupled orbit so truncation error dominates roundoff;
    # fitted log-log slope of drift against dt sits at 4
    inst = example1(eps=0.5)
    S = inst.structure
    H = _full_hamiltonian(inst)
    state0 = np.array([0.2, 0.3, 0.7, 0.6, 0.4])
    dts = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    drifts = []
    for dt in dts:
        tr = integrate(H, S, state0, T=3.0, dt=dt)
        assert not tr.escaped
        drifts.append(tr.energy_drift())
    slope = np.polyfit(np.log(dts), np.log(drifts), 1)[0]
    assert 3.7 <= slope <= 4.3
    # and the headline ratio: halving dt buys a factor of about 16
    assert drifts[0] / drifts[1] == pytest.approx(16.0, rel=0.2)


# ---------------------------------------------------------------------------
# rotation numbers


def test_rotation_numbers_exact_on_linear_flow():
    inst = example1(eps=0.0)
    S = inst.structure
    N = inst.normal_form.to_series(d_max=4, K_max=4)
    tf = torus_flow(N, S, np.array([0.3, 0.7]), T=50.0, dt=0.05)
    rot = rotation_numbers(tf)
    np.testing.assert_allclose(rot, inst.omega, atol=1e-12)
    assert tf.energy_drift() == 0.0


def test_rotation_numbers_need_enough_samples():
    t = np.linspace(0.0, 1.0, 5)
    states = np.zeros((5, 5))
    traj = Trajectory(t, states, np.zeros(5), (1, 2, 1))
    with pytest.raises(ValueError, match="too short"):
        rotation_numbers(traj)


def test_trajectory_angle_block():
    states = np.arange(10.0).reshape(2, 5)
    traj = Trajectory(np.array([0.0, 1.0]), states,
                      np.array([3.0, 3.5]), (1, 2, 1))
    np.testing.assert_array_equal(traj.x, states[:, 1:3])
    assert traj.energy_drift() == 0.5


# ---------------------------------------------------------------------------
# invariance residual


def _identity_embedding(S, G):
    theta = 2.0 * np.pi * np.arange(G) / G
    X1, X2 = np.meshgrid(theta, theta, indexing="ij")
    states = np.zeros((G, G, S.l + S.n + 2 * S.m))
    states[..., S.l] = X1
    states[..., S.l + 1] = X2
    return {"states": states}


def test_invariance_zero_for_unperturbed_torus():
    inst = example1(eps=0.0)
    S = inst.structure
    N = inst.normal_form.to_series(d_max=4, K_max=4)
    emb = _identity_embedding(S, 16)
    resid, fieldnorm = invariance_residual(emb, inst.omega, N, S)
    assert resid < 1e-12
    assert fieldnorm.shape == (16, 16)


def test_invariance_detects_wrong_frequency():
    # perturbing one frequency component by 1e-3 must show up at least
    # at the 1e-4 level: the residual is a detector, not a formality
    inst = example1(eps=0.0)
    S = inst.structure
    N = inst.normal_form.to_series(d_max=4, K_max=4)
    emb = _identity_embedding(S, 16)
    omega_bad = inst.omega.copy()
    omega_bad[0] += 1e-3
    resid, _ = invariance_residual(emb, omega_bad, N, S)
    assert resid >= 1e-4


def test_invariance_aliasing_guard():
    # content at mode 3 on an 8-point grid sits in the top quarter of
    # the band; the spectral derivative would silently alias, so the
    # call must refuse instead
    inst = example1(eps=0.0)
    S = inst.structure
    N = inst.normal_form.to_series(d_max=4, K_max=4)
    emb = _identity_embedding(S, 8)
    theta = 2.0 * np.pi * np.arange(8) / 8
    emb["states"][..., 0] += 1e-3 * np.cos(3.0 * theta)[:, None]
    with pytest.raises(ValueError, match="grid too coarse"):
        invariance_residual(emb, inst.omega, N, S)


def test_long_horizon_conservation_on_converged_torus(preset1_run):
    # in the final coordinates the torus y = z = 0 is invariant, so the
    # restricted flow can run for a long window; the drift over T = 100
    # is pure integrator error and sits far below the 1e-8 budget
    st = preset1_run.state
    inst = example1(eps=1e-4)
    Hf = add(st.N.to_series(d_max=4, K_max=st.P.K_max), st.P)
    tf = torus_flow(Hf, inst.structure, np.array([0.3, 0.7]),
                    T=100.0, dt=1e-2)
    assert tf.energy_drift() <= 1e-8


def test_rotation_on_converged_torus(preset1_run):
    st = preset1_run.state
    inst = example1(eps=1e-4)
    Hf = add(st.N.to_series(d_max=4, K_max=st.P.K_max), st.P)
    tf = torus_flow(Hf, inst.structure, np.array([0.3, 0.7]),
                    T=200.0, dt=0.05)
    rot = rotation_numbers(tf)
    np.testing.assert_allclose(rot, preset1_run.omega_inf, atol=1e-8)


def test_invariance_shape_validation():
    inst = example1(eps=0.0)
    S = inst.structure
    N = inst.normal_form.to_series(d_max=4, K_max=4)
    with pytest.raises(ValueError, match="wrong shape"):
        invariance_residual({"states": np.zeros((8, 8, 4))}, inst.omega,
                            N, S)
    with pytest.raises(ValueError, match="uniform"):
        invariance_residual({"states": np.zeros((8, 4, 5))}, inst.omega,
                            N, S)
