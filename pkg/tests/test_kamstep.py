"""Single-iteration mechanics: schedules, Lie transforms, the step itself.

Multi-step convergence lives in test_driver and test_acceptance; here we
pin down the bookkeeping of one pass and the failure modes.
"""

import math

import numpy as np
import pytest

from hypertori.kamstep import (
    KamParams,
    KamState,
    NonContraction,
    SieveFailed,
    initial_state,
    kam_step,
    lie_transform,
    split_normal_form,
    torus_metric,
    update_params,
)
from hypertori.presets import example1, example2
from hypertori.series import Series, add, sup_norm

from helpers import series_close


# ---------------------------------------------------------------------------
# parameter schedule


def _state_with(r, s, gamma, eps):
    inst = example1(eps=1e-4)
    return KamState(nu=0, r=r, s=s, gamma=gamma, eps=eps, K=0,
                    N=inst.normal_form, P=inst.P)


def test_update_params_closed_forms():
    params = KamParams(gamma0=0.05, r0=1.0)
    st = _state_with(r=0.8, s=1e-3, gamma=0.04, eps=1e-2)
    up = update_params(st, params, n=2)
    assert up.eps_p == 1e-2 ** (10.0 / 9.0)
    assert up.gamma_p == params.gamma0 / 4.0 + 0.04 / 2.0
    assert up.r_p == params.r0 / 4.0 + 0.8 / 2.0
    assert up.s_p == 1e-3 * 1e-2 ** (1.0 / 3.0) / 8.0


def test_update_params_mode_count_policies():
    # base = floor(log(1/s)) + 1; the two policies differ only in the
    # exponent: a_star + 2 versus a flat cube.
    st = _state_with(r=0.8, s=1e-3, gamma=0.04, eps=1e-2)
    base = math.floor(math.log(1.0 / st.s)) + 1
    assert base == 7

    paper = KamParams(K_policy="paper_schedule", a_star=7, K_hard=10 ** 9)
    up = update_params(st, paper, n=2)
    assert up.K_raw == base ** 9
    assert up.K_eff == base ** 9

    table = KamParams(K_policy="iteration_table", K_hard=10 ** 9)
    up = update_params(st, table, n=2)
    assert up.K_raw == base ** 3
    assert up.K_eff == base ** 3


def test_update_params_hard_cap():
    st = _state_with(r=0.8, s=1e-6, gamma=0.04, eps=1e-2)
    params = KamParams(K_hard=32)
    up = update_params(st, params, n=2)
    assert up.K_raw > 32
    assert up.K_eff == 32


def test_update_params_rejects_degenerate_state():
    params = KamParams()
    with pytest.raises(ValueError):
        update_params(_state_with(r=0.8, s=0.0, gamma=0.04, eps=1e-2),
                      params, n=2)
    with pytest.raises(ValueError):
        update_params(_state_with(r=0.8, s=1e-3, gamma=0.04, eps=1.0),
                      params, n=2)


def test_schedule_telescopes_to_half():
    # r and gamma are affine contractions with fixed points r0/2, gamma0/2;
    # forty rounds land within double precision of the limit.
    params = KamParams(gamma0=0.05, r0=1.0)
    r, gamma = params.r0, params.gamma0
    for _ in range(40):
        r = params.r0 / 4.0 + r / 2.0
        gamma = params.gamma0 / 4.0 + gamma / 2.0
    assert abs(r - params.r0 / 2.0) < 1e-12
    assert abs(gamma - params.gamma0 / 2.0) < 1e-12
    # so the analyticity domain and the sieve constant never collapse
    assert r > params.r0 / 2.0
    assert gamma > params.gamma0 / 2.0


# ---------------------------------------------------------------------------
# Lie transform


def test_lie_transform_linear_hand_case():
    # H = y, F = cos x1 on the alpha=1 structure: the only surviving
    # bracket is H_y . E F_x, giving y - sin x1; the second-order term
    # has neither y nor z and dies, so the reported tail is exactly zero.
    S = example1(alpha=1.0).structure
    H = Series.from_terms(2, 1, 1, 2, 2, [((0, 0), (1,), (0, 0), 1.0)])
    F = Series.from_terms(2, 1, 1, 2, 2, [((1, 0), (0,), (0, 0), 0.5),
                                          ((-1, 0), (0,), (0, 0), 0.5)])
    acc, last = lie_transform(H, F, S, order=4, d_cap=4, K_cap=2)
    assert acc.get((0, 0), (1,), (0, 0)) == pytest.approx(1.0)
    assert acc.get((1, 0), (0,), (0, 0)) == pytest.approx(0.5j)
    assert acc.get((-1, 0), (0,), (0, 0)) == pytest.approx(-0.5j)
    assert sup_norm(last, 0.5, 0.1) == 0.0


def test_lie_transform_order_one_is_single_bracket():
    # H = y^2 against F = cos x2 does not terminate at first order, so
    # order=1 must report a nonzero last term (the truncation is real)
    S = example1().structure
    H = Series.from_terms(2, 1, 1, 2, 2, [((0, 0), (2,), (0, 0), 1.0)])
    F = Series.from_terms(2, 1, 1, 2, 2, [((0, 1), (0,), (0, 0), 0.5),
                                          ((0, -1), (0,), (0, 0), 0.5)])
    _, last1 = lie_transform(H, F, S, order=1, d_cap=4, K_cap=2)
    assert sup_norm(last1, 0.5, 0.5) > 0.0


def test_torus_metric_hand_value():
    # |k|_1-weighted k00 modes plus plain l1 of the higher-degree rest:
    # two cos-x1 halves at |k|=1 give 1.0, the y coefficient gives 2.0.
    P = Series.from_terms(2, 1, 1, 2, 1, [
        ((1, 0), (0,), (0, 0), 0.5),
        ((-1, 0), (0,), (0, 0), 0.5),
        ((0, 0), (1,), (0, 0), 2.0),
    ])
    assert torus_metric(P) == pytest.approx(3.0)


# ---------------------------------------------------------------------------
# normal-form split


def test_split_recovers_exact_normal_form():
    inst = example2()
    N = inst.normal_form
    H = N.to_series(d_max=4, K_max=2)
    N_plus, P_plus = split_normal_form(H, N, inst.n0)
    assert sup_norm(P_plus, 0.5, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert N_plus.e == pytest.approx(N.e)
    np.testing.assert_allclose(N_plus.Omega, N.Omega, rtol=0, atol=0)
    np.testing.assert_allclose(N_plus.A.avg(), N.A.avg(), atol=1e-15)
    np.testing.assert_allclose(N_plus.M.avg(), N.M.avg(), atol=1e-15)


def test_split_symmetrizes_cross_terms():
    inst = example2()
    N = inst.normal_form
    H = add(N.to_series(d_max=4, K_max=2),
            Series.from_terms(2, 3, 2, 4, 2,
                              [((0, 0), (1, 1, 0), (0, 0, 0, 0), 0.3)]))
    N_plus, P_plus = split_normal_form(H, N, inst.n0)
    assert N_plus.A.avg()[0, 1] == N_plus.A.avg()[1, 0]
    # the split must not lose the term: reassembling reproduces H
    series_close(N_plus.to_series(d_max=4, K_max=2), H, tol=1e-14)
    assert sup_norm(P_plus, 0.5, 0.5) == pytest.approx(0.0, abs=1e-15)


def test_split_pins_leading_frequencies():
    inst = example2()
    N = inst.normal_form
    H = N.to_series(d_max=4, K_max=2)
    N_plus, _ = split_normal_form(H, N, inst.n0)
    # first n0 components copied bitwise, never recomputed
    for i in range(inst.n0):
        assert N_plus.Omega[i] == N.Omega[i]


# ---------------------------------------------------------------------------
# one full step


def test_zero_perturbation_is_a_fixed_point():
    inst = example1(eps=0.0, perturbation=Series.zero(2, 1, 1, 4, 1))
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    st1 = kam_step(st, inst, params)
    assert sup_norm(st1.P, st1.r, st1.s) == 0.0
    assert st1.N.Omega[0] == inst.normal_form.Omega[0]
    assert st1.nu == 1
    # the schedule still advances: this is a step, not a stall
    assert st1.s < st.s
    assert st1.gamma < st.gamma


def test_one_step_cancels_generating_families():
    inst = example1(eps=1e-4)
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    st1 = kam_step(st, inst, params)
    norm0 = st.diagnostics[0]["norm_P"]

    # the solved families are annihilated to solver precision
    for k in [(1, 0), (0, 1), (-1, 0), (0, -1)]:
        assert abs(st1.P.get(k, (0,), (0, 0))) <= 1e-8 * norm0
        assert abs(st1.P.get(k, (0,), (1, 0))) <= 1e-8 * norm0

    # the first-order remainder is the bracket term: the y-linear
    # coefficient at k picks up exactly -P_k00 from <Ay, E ik f_k0>
    p_k00 = inst.P.get((1, 0), (0,), (0, 0))
    got = st1.P.get((1, 0), (1,), (0, 0))
    assert got == pytest.approx(-p_k00, rel=1e-6)

    # quadratic-ish contraction on the measured norms
    d = st1.diagnostics[-1]
    assert d["norm_Pplus"] < 1e-3 * d["norm_P"]


def test_step_diagnostics_schema():
    inst = example1(eps=1e-4)
    params = KamParams(gamma0=0.05)
    st1 = kam_step(initial_state(inst, params), inst, params)
    d = st1.diagnostics[-1]
    for key in ["nu", "r", "s", "gamma", "eps_sched", "K", "K_raw", "h1",
                "H1_ok", "sieve_margin", "cond", "solver", "unknowns",
                "residual", "norm_P", "norm_Pplus", "eps_measured",
                "Delta_formula", "H5_ok", "H6_ok", "lie_tail",
                "product_tail", "torus_metric", "y_star", "Omega_drift",
                "reality_defect"]:
        assert key in d, key
    assert d["nu"] == 0
    assert d["residual"] < 1e-10
    assert d["reality_defect"] < 1e-12


def test_step_preserves_internal_frequencies():
    # the n0-locked components must come out bitwise identical, drift
    # confined to the complement
    inst = example2(eps=1e-4)
    params = KamParams(gamma0=0.05)
    st1 = kam_step(initial_state(inst, params), inst, params)
    Om0 = inst.normal_form.Omega
    Om1 = st1.N.Omega
    assert Om1[0] == Om0[0]
    assert Om1[1] == Om0[1]
    assert abs(Om1[2] - Om0[2]) <= 10 * 1e-4


def test_frequency_drift_respects_sieve_persistence():
    # when the step's smallness gate holds, the toral frequency moves by
    # less than the sieve slack gamma - gamma_plus over the active modes;
    # with n0-locked frequencies the drift is exactly zero, so the
    # implication holds with room to spare
    inst = example1(eps=1e-4)
    params = KamParams(gamma0=0.05)
    st0 = initial_state(inst, params)
    st1 = kam_step(st0, inst, params)
    d = st1.diagnostics[-1]
    E = inst.structure.E
    omega0 = -E.T @ inst.normal_form.Omega
    omega1 = -E.T @ st1.N.Omega
    drift = float(np.abs(omega1 - omega0).max())
    if d["H5_ok"]:
        assert drift * d["K"] <= st0.gamma - st1.gamma


def test_noncontraction_raises_on_large_forcing():
    # at eps = 1, the remainder after one step is genuinely bigger than
    # the input and the step must refuse to continue
    inst = example1(eps=1.0)
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    with pytest.raises(NonContraction, match="did not contract"):
        kam_step(st, inst, params)


def test_noncontraction_carries_diagnostics():
    inst = example1(eps=1.0)
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    with pytest.raises(NonContraction) as exc_info:
        kam_step(st, inst, params)
    diag = exc_info.value.diagnostics
    assert diag["norm_Pplus"] > diag["norm_P"]


def test_sieve_failure_on_resonant_frequency():
    # beta = 1 makes omega = (-1,-1): k = (1,-1) is an exact resonance
    inst = example1(eps=1e-4, beta=1.0)
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    with pytest.raises(SieveFailed, match="small divisor"):
        kam_step(st, inst, params)


# ---------------------------------------------------------------------------
# initial state


def test_initial_state_self_consistent_width():
    inst = example1(eps=1e-4)
    params = KamParams(gamma0=0.05)
    st = initial_state(inst, params)
    assert st.nu == 0
    assert st.r == params.r0
    assert st.gamma == params.gamma0
    assert 0.0 < st.s < 1.0
    # measured size of the preset perturbation exceeds the cap, so the
    # schedule runs on the clamped value and records the raw one
    d = st.diagnostics[0]
    assert d["event"] == "init"
    assert d["nu"] == -1
    assert st.eps == params.eps_cap
    assert d["eps_measured"] > params.eps_cap
    assert d["norm_P"] > 0.0


def test_initial_state_explicit_width_wins():
    inst = example1(eps=1e-4)
    params = KamParams(gamma0=0.05, s0=1e-3)
    st = initial_state(inst, params)
    assert st.s == 1e-3
