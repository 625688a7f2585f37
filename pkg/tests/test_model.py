"""Normal forms, series matrices, and the standing condition checks."""

import math

import numpy as np
import pytest

from hypertori.model import (NormalForm, SeriesMatrix, check_hyperbolicity,
                             check_mb, check_nd, check_russmann, compute_eta)
from hypertori.presets import (GOLDEN, example1, example1_omega_fn, example2,
                               example2_omega_fn)
from hypertori.series import Series

ETA_PRESET1 = 2.0 / (math.sqrt(432.0) + 12.0)


# ----------------------------------------------------------------------
# SeriesMatrix


def test_series_matrix_constant_and_modes():
    M = SeriesMatrix.constant(np.diag([1.0, -1.0]), n=2)
    np.testing.assert_array_equal(M.avg(), np.diag([1.0, -1.0]))
    assert M.is_constant()
    assert M.nonzero_modes() == []
    assert M.nonzero_modes(include_zero=True) == [(0, 0)]


def test_series_matrix_mode_out_of_grid_is_zero():
    M = SeriesMatrix.constant(np.eye(2), n=2, K_max=0)
    np.testing.assert_array_equal(M.mode((1, 0)), np.zeros((2, 2)))
    np.testing.assert_array_equal(M.mode((0, 0)), np.eye(2))


def test_series_matrix_from_terms_and_deviation():
    # hermitian pair at k = (1, 0) with entry 0.1: |M_k|_2 = 0.1 per mode
    M = SeriesMatrix.from_terms(2, 2, n=2, K_max=1,
                                terms=[(0, 0, (1, 0), 0.1),
                                       (0, 0, (-1, 0), 0.1)])
    assert sorted(M.nonzero_modes()) == [(-1, 0), (1, 0)]
    r = 0.7
    assert M.deviation(r) == pytest.approx(2 * 0.1 * math.exp(r), rel=1e-14)
    assert SeriesMatrix.constant(np.eye(2), 2).deviation(1.0) == 0.0


def test_series_matrix_rebase_roundtrip():
    M = SeriesMatrix.from_terms(2, 2, n=2, K_max=1,
                                terms=[(0, 1, (1, 0), 0.3 + 0.1j),
                                       (1, 0, (-1, 0), 0.3 - 0.1j)])
    back = M.rebased(3).rebased(1)
    np.testing.assert_allclose(back.grids, M.grids)


def test_series_matrix_symmetry_defect():
    sym = SeriesMatrix.constant([[1.0, 2.0], [2.0, 5.0]], n=1)
    assert sym.symmetry_defect() == 0.0
    skew = SeriesMatrix.constant([[1.0, 2.0], [0.0, 5.0]], n=1)
    assert skew.symmetry_defect() == 2.0
    np.testing.assert_array_equal(skew.transpose().avg(),
                                  skew.avg().T)


# ----------------------------------------------------------------------
# NormalForm


def test_normal_form_validation():
    n, l, m = 2, 1, 1
    ok = dict(e=0.0, Omega=np.array([1.0]),
              A=SeriesMatrix.constant([[1.0]], n),
              B=SeriesMatrix.constant(np.zeros((1, 2)), n),
              M=SeriesMatrix.constant(np.diag([1.0, -1.0]), n),
              h=Series.zero(n, l, m, 4, 0))
    NormalForm(**ok)

    bad = dict(ok)
    bad["M"] = SeriesMatrix.constant([[1.0, 0.5], [0.0, -1.0]], n)
    with pytest.raises(ValueError, match="symmetric"):
        NormalForm(**bad)

    bad = dict(ok)
    bad["h"] = Series.from_terms(n, l, m, 4, 0, [((0, 0), (1,), (0, 0), 1.0)])
    with pytest.raises(ValueError, match="degree"):
        NormalForm(**bad)

    bad = dict(ok)
    bad["B"] = SeriesMatrix.constant(np.zeros((2, 2)), n)
    with pytest.raises(ValueError, match="B block"):
        NormalForm(**bad)


def test_to_series_matches_quadratic_form():
    rng = np.random.default_rng(3)
    n, l, m = 2, 2, 1
    Araw = rng.uniform(-1, 1, (l, l))
    Mraw = rng.uniform(-1, 1, (2 * m, 2 * m))
    A = 0.5 * (Araw + Araw.T)
    M = 0.5 * (Mraw + Mraw.T)
    B = rng.uniform(-1, 1, (l, 2 * m))
    Omega = rng.uniform(-1, 1, l)
    N = NormalForm(e=0.37, Omega=Omega,
                   A=SeriesMatrix.constant(A, n),
                   B=SeriesMatrix.constant(B, n),
                   M=SeriesMatrix.constant(M, n),
                   h=Series.zero(n, l, m, 4, 0))
    H = N.to_series(d_max=2, K_max=1)
    y = rng.uniform(-0.5, 0.5, (5, l))
    z = rng.uniform(-0.5, 0.5, (5, 2 * m))
    x = rng.uniform(0, 2 * np.pi, (5, n))
    w = np.concatenate([y, z], axis=1)
    MM = np.block([[A, B], [B.T, M]])
    ref = 0.37 + y @ Omega + 0.5 * np.einsum("pi,ij,pj->p", w, MM, w)
    np.testing.assert_allclose(H.evaluate(x, y, z).real, ref, atol=1e-13)


def test_to_series_keeps_h():
    inst = example1()
    h = Series.from_terms(2, 1, 1, 4, 0, [((0, 0), (3,), (0, 0), 0.25)])
    N = NormalForm(e=inst.normal_form.e, Omega=inst.normal_form.Omega,
                   A=inst.normal_form.A, B=inst.normal_form.B,
                   M=inst.normal_form.M, h=h)
    H = N.to_series(4, 1)
    assert H.get((0, 0), (3,), (0, 0)) == 0.25


# ----------------------------------------------------------------------
# hyperbolicity


def test_hyperbolicity_example1():
    chk = check_hyperbolicity(example1().normal_form.M.avg(), sigma0=1.0)
    assert chk.passed
    got = sorted(np.round(chk.eigenvalues.real, 12))
    np.testing.assert_allclose(got, [-1.0, 1.0], atol=1e-12)
    assert chk.min_abs_re == pytest.approx(1.0, abs=1e-12)


def test_hyperbolicity_example2():
    chk = check_hyperbolicity(example2().normal_form.M.avg(), sigma0=1.0)
    assert chk.passed
    got = sorted(chk.eigenvalues.real)
    np.testing.assert_allclose(got, [-math.sqrt(2.0), -1.0, 1.0, math.sqrt(2.0)],
                               atol=1e-12)


def test_hyperbolicity_rejects_elliptic():
    # J M with M = I has spectrum +-i: zero real part, not hyperbolic
    chk = check_hyperbolicity(np.eye(2), sigma0=1.0)
    assert not chk.passed
    assert chk.min_abs_re == pytest.approx(0.0, abs=1e-12)


def test_hyperbolicity_validation():
    with pytest.raises(ValueError, match="even"):
        check_hyperbolicity(np.eye(3), 1.0)
    with pytest.raises(ValueError, match="symmetric"):
        check_hyperbolicity(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0)


# ----------------------------------------------------------------------
# twist rank


def test_russmann_example1_fails_by_design():
    chk = check_russmann(example1_omega_fn(), [[-0.05, 0.05]], grid_res=9, n=2)
    assert not chk.passed
    assert chk.max_rank == 1


def test_russmann_example2_full_rank():
    chk = check_russmann(example2_omega_fn(), [[0.9, 1.1], [1.5, 1.7]],
                         grid_res=7, n=2)
    assert chk.passed
    assert chk.max_rank == 2


def test_russmann_grid_validation():
    with pytest.raises(ValueError, match="grid_res"):
        check_russmann(example2_omega_fn(), [[0.9, 1.1], [1.5, 1.7]],
                       grid_res=2, n=2)


# ----------------------------------------------------------------------
# nondegeneracy and the closeness margin


def test_nd_example1():
    N = example1().normal_form
    chk = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=1)
    assert chk.passed
    np.testing.assert_array_equal(chk.nd.U, [[1.0]])
    np.testing.assert_array_equal(chk.nd.Y, np.diag([1.0, -1.0]))


def test_nd_example2_minor_vs_full():
    N = example2().normal_form
    # the full averaged action block is singular by construction ...
    assert np.linalg.matrix_rank(N.A.avg()) == 2
    # ... but the working 2x2 minor is the identity
    chk = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=2)
    assert chk.passed
    np.testing.assert_array_equal(chk.nd.U, np.eye(2))
    # insisting on the full block must fail
    chk3 = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=3)
    assert not chk3.passed
    assert "ill-conditioned" in chk3.message


def test_nd_u_inv_padded():
    N = example2().normal_form
    nd = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=2).nd
    pad = nd.U_inv_padded
    assert pad.shape == (3, 3)
    np.testing.assert_array_equal(pad[:2, :2], np.eye(2))
    assert pad[2, 2] == 0.0


def test_nd_validation():
    N = example1().normal_form
    with pytest.raises(ValueError, match="n0"):
        check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=0)


def test_eta_example1_frozen():
    # alpha = 3 (1 + 1 + 0) * ... = 6, rho0 = 4 (1 + 2)^1 = 12,
    # eta = 2 / (sqrt(144 + 288) + 12) = 2 / (sqrt(432) + 12)
    N = example1().normal_form
    nd = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=1).nd
    eta = compute_eta(nd, N.M.avg(), N.B.avg(), sigma0=1.0, m=1)
    assert eta.alpha == pytest.approx(6.0, rel=1e-14)
    assert eta.rho0 == pytest.approx(12.0, rel=1e-14)
    assert eta.eta == pytest.approx(ETA_PRESET1, rel=1e-12)


def test_eta_quadratic_identity():
    # eta solves alpha rho0 eta^2 + rho0 eta - 1 = 0 by construction
    for inst, n0 in ((example1(), 1), (example2(), 2)):
        N = inst.normal_form
        nd = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), n0=n0).nd
        d = compute_eta(nd, N.M.avg(), N.B.avg(), sigma0=1.0, m=inst.structure.m)
        resid = d.alpha * d.rho0 * d.eta ** 2 + d.rho0 * d.eta - 1.0
        assert abs(resid) < 1e-12


def test_mb_check_threshold():
    n = 2
    A = SeriesMatrix.constant([[1.0]], n)
    B0 = SeriesMatrix.constant(np.zeros((1, 2)), n)
    small = SeriesMatrix.from_terms(2, 2, n, 1,
                                    [(0, 0, (1, 0), 1e-4), (0, 0, (-1, 0), 1e-4)])
    base = np.diag([1.0, -1.0])
    Mser = SeriesMatrix.constant(base, n).rebased(1)
    Mser.grids += small.grids * 0       # same grid shape, constant M
    chk = check_mb(A, small, Mser, eta=ETA_PRESET1, r=1.0)
    assert chk.passed
    assert chk.dev_B == pytest.approx(2e-4 * math.e, rel=1e-12)
    big = SeriesMatrix.from_terms(2, 2, n, 1,
                                  [(0, 0, (1, 0), 0.5), (0, 0, (-1, 0), 0.5)])
    chk2 = check_mb(A, big, Mser, eta=ETA_PRESET1, r=1.0)
    assert not chk2.passed
