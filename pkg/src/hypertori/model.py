"""Normal-form data and the standing nondegeneracy checks.

The unperturbed part of every Hamiltonian handled here is

    N = e + <Omega, y> + 1/2 <(y, z), MM(x) (y, z)> + h(x, y, z)

with MM(x) = [[A(x), B(x)], [B(x)^T, M(x)]] a symmetric matrix of
truncated Fourier series and h of total degree >= 3.  The checks are:

  hyperbolicity   all eigenvalues of J [M] stay sigma0 away from the
                  imaginary axis,
  twist rank      the frequency map lambda -> omega(lambda) has full
                  Ruessmann rank (derivatives up to order n - 1 span),
  nondegeneracy   the leading n0 x n0 minor U of [A] and the Schur-type
                  matrix Y = [M] - [B]^T diag(U^{-1}, 0) [B] are invertible,
  closeness       the x-dependent parts of M and B stay below the margin
                  eta computed from U, Y, [B], [M] and sigma0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import series
from .series import Series, _embed, _l1_grid


class SeriesMatrix:
    """Matrix of pure Fourier series (no y, z dependence).

    Stored as one complex array of shape (rows, cols) + (2K+1,)*n with
    centered Fourier indexing.  Real symmetric blocks keep the hermitian
    symmetry grids[..., -k] = conj(grids[..., k]).
    """

    __slots__ = ("n", "K_max", "grids")

    def __init__(self, n: int, K_max: int, grids: np.ndarray):
        grids = np.asarray(grids, dtype=complex)
        if grids.ndim != 2 + n or grids.shape[2:] != (2 * K_max + 1,) * n:
            raise ValueError("grids shape does not match (rows, cols, fourier)")
        self.n = n
        self.K_max = K_max
        self.grids = grids

    @classmethod
    def constant(cls, mat, n: int, K_max: int = 0):
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        grids = np.zeros(mat.shape + (2 * K_max + 1,) * n, dtype=complex)
        grids[(...,) + (K_max,) * n] = mat
        return cls(n, K_max, grids)

    @classmethod
    def from_terms(cls, rows, cols, n, K_max, terms):
        """terms: iterable of (row, col, k, value)."""
        grids = np.zeros((rows, cols) + (2 * K_max + 1,) * n, dtype=complex)
        for r, c, k, v in terms:
            grids[(r, c) + tuple(int(q) + K_max for q in k)] += v
        return cls(n, K_max, grids)

    @property
    def shape(self):
        return self.grids.shape[:2]

    def avg(self) -> np.ndarray:
        """The torus average [.], a real matrix."""
        return self.grids[(...,) + (self.K_max,) * self.n].real.copy()

    def mode(self, k) -> np.ndarray:
        if any(abs(int(q)) > self.K_max for q in k):
            return np.zeros(self.shape, dtype=complex)
        return self.grids[(...,) + tuple(int(q) + self.K_max for q in k)].copy()

    def nonzero_modes(self, include_zero=False):
        """Sorted list of modes k carrying any nonzero entry."""
        flat = np.moveaxis(self.grids, (0, 1), (-2, -1))
        nz = np.any(flat != 0.0, axis=(-2, -1))
        out = []
        for idx in np.argwhere(nz):
            k = tuple(int(v) - self.K_max for v in idx)
            if include_zero or any(k):
                out.append(k)
        return sorted(out)

    def is_constant(self) -> bool:
        return not self.nonzero_modes()

    def transpose(self):
        return SeriesMatrix(self.n, self.K_max, np.swapaxes(self.grids, 0, 1))

    def deviation(self, r: float) -> float:
        """Weighted distance from the average: sum_{k != 0} |M_k|_2 e^{|k|_1 r}."""
        total = 0.0
        K = self.K_max
        l1 = _l1_grid(self.n, K)
        flat = np.moveaxis(self.grids, (0, 1), (-2, -1))
        nz = np.any(flat != 0.0, axis=(-2, -1))
        for idx in np.argwhere(nz):
            k = tuple(int(v) - K for v in idx)
            if not any(k):
                continue
            total += np.linalg.norm(self.mode(k), 2) * math.exp(l1[tuple(idx)] * r)
        return float(total)

    def rebased(self, K_new: int):
        rows, cols = self.shape
        out = np.zeros((rows, cols) + (2 * K_new + 1,) * self.n, dtype=complex)
        for r in range(rows):
            for c in range(cols):
                out[r, c] = _embed(self.grids[r, c], self.K_max, K_new)
        return SeriesMatrix(self.n, K_new, out)

    def copy(self):
        return SeriesMatrix(self.n, self.K_max, self.grids.copy())

    def symmetry_defect(self) -> float:
        return float(np.abs(self.grids - np.swapaxes(self.grids, 0, 1)).max())


@dataclass
class NormalForm:
    """e + <Omega, y> + quadratic block + h, see module docstring."""

    e: float
    Omega: np.ndarray
    A: SeriesMatrix          # l x l, symmetric
    B: SeriesMatrix          # l x 2m
    M: SeriesMatrix          # 2m x 2m, symmetric
    h: Series                # degree >= 3 remainder, fixed along the iteration

    def __post_init__(self):
        self.Omega = np.asarray(self.Omega, dtype=float)
        l = self.Omega.shape[0]
        if self.A.shape != (l, l):
            raise ValueError("A block shape mismatch")
        if self.A.symmetry_defect() > 1e-13 * (1 + np.abs(self.A.grids).max()):
            raise ValueError("A block must be symmetric")
        if self.M.symmetry_defect() > 1e-13 * (1 + np.abs(self.M.grids).max()):
            raise ValueError("M block must be symmetric")
        two_m = self.M.shape[0]
        if self.B.shape != (l, two_m):
            raise ValueError("B block shape mismatch")
        if not self.h.is_zero() and self.h.degree_part(0, 2).l1() > 0:
            raise ValueError("h must have total degree >= 3")

    @property
    def l(self) -> int:
        return self.Omega.shape[0]

    @property
    def m(self) -> int:
        return self.M.shape[0] // 2

    def to_series(self, d_max: int, K_max: int) -> Series:
        """Assemble N as a single series (quadratic part written out)."""
        n = self.A.n
        l, m = self.l, self.m
        width = l + 2 * m
        shape = (2 * K_max + 1,) * n
        center = (K_max,) * n
        coeffs: dict = {}

        def bump(e, grid_or_value, K_from=None):
            g = coeffs.setdefault(e, np.zeros(shape, dtype=complex))
            if K_from is None:
                g[center] += grid_or_value
            else:
                g += _embed(grid_or_value, K_from, K_max)

        if self.e != 0.0:
            bump((0,) * width, self.e)
        for b in range(l):
            if self.Omega[b] != 0.0:
                e = tuple(1 if q == b else 0 for q in range(width))
                bump(e, self.Omega[b])

        def quad(block: SeriesMatrix, off_r: int, off_c: int, half: bool):
            rows, cols = block.shape
            for r in range(rows):
                for c in range(cols):
                    g = block.grids[r, c]
                    if not np.any(g):
                        continue
                    e = [0] * width
                    e[off_r + r] += 1
                    e[off_c + c] += 1
                    w = 0.5 if half else 1.0
                    bump(tuple(e), w * g, K_from=block.K_max)

        quad(self.A, 0, 0, half=True)
        quad(self.B, 0, l, half=False)
        quad(self.M, l, l, half=True)

        out = Series(n, l, m, max(d_max, 2), K_max, coeffs)
        if not self.h.is_zero():
            out = series.add(out, self.h)
        return out


@dataclass
class ProblemInstance:
    """A concrete model: structure, unperturbed normal form, perturbation."""

    structure: "PoissonStructure"
    normal_form: NormalForm
    P: Series
    n0: int
    lam: np.ndarray | None = None
    name: str = ""

    @property
    def omega(self) -> np.ndarray:
        return self.structure.toral_frequency(self.normal_form.Omega)


# ----------------------------------------------------------------------
# checks


@dataclass
class HyperbolicityCheck:
    eigenvalues: np.ndarray
    min_abs_re: float
    sigma0: float
    passed: bool


def check_hyperbolicity(M_avg: np.ndarray, sigma0: float) -> HyperbolicityCheck:
    """Spectrum of J [M] must avoid the sigma0 strip around i R."""
    M_avg = np.asarray(M_avg, dtype=float)
    if M_avg.shape[0] != M_avg.shape[1] or M_avg.shape[0] % 2:
        raise ValueError("M average must be square of even size")
    if not np.allclose(M_avg, M_avg.T, rtol=0, atol=1e-12 * (1 + np.abs(M_avg).max())):
        raise ValueError("M average must be symmetric")
    m = M_avg.shape[0] // 2
    J = np.zeros_like(M_avg)
    J[:m, m:] = np.eye(m)
    J[m:, :m] = -np.eye(m)
    ev = np.linalg.eigvals(J @ M_avg)
    min_re = float(np.abs(ev.real).min())
    return HyperbolicityCheck(ev, min_re, sigma0, bool(min_re >= sigma0 - 1e-12))


@dataclass
class RussmannCheck:
    max_rank: int
    needed: int
    passed: bool
    ranks: np.ndarray = None


def check_russmann(omega_fn, lambda_box, grid_res: int, n: int,
                   rank_tol: float = 1e-8) -> RussmannCheck:
    """Numerical Ruessmann rank of the frequency map.

    Samples omega on a tensor grid over the parameter box, forms all
    partial derivatives of multi-order |alpha| <= n - 1 by repeated
    second-order differencing, and reports the maximal numerical rank of
    the n x (#alpha) derivative matrix over the grid.
    """
    box = [tuple(map(float, iv)) for iv in lambda_box]
    d = len(box)
    if grid_res < 3:
        raise ValueError("grid_res must be >= 3 for central differences")
    axes = [np.linspace(lo, hi, grid_res) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    om = np.apply_along_axis(lambda lam: np.asarray(omega_fn(lam), dtype=float),
                             1, pts)
    field_shape = tuple(grid_res for _ in range(d)) + (n,)
    om = om.reshape(field_shape)

    spacings = [ax[1] - ax[0] for ax in axes]
    alphas = [a for a in itertools.product(range(n), repeat=d) if sum(a) <= n - 1]
    cols = []
    for alpha in alphas:
        D = om
        for t in range(d):
            for _ in range(alpha[t]):
                D = np.gradient(D, spacings[t], axis=t, edge_order=2)
        cols.append(D)
    # (npts, n, #alpha)
    stack = np.stack([c.reshape(-1, n) for c in cols], axis=-1)
    sv = np.linalg.svd(stack, compute_uv=False)
    cutoff = rank_tol * np.maximum(sv[:, :1], 1e-300)
    ranks = (sv > cutoff).sum(axis=1)
    max_rank = int(ranks.max())
    return RussmannCheck(max_rank, n, bool(max_rank == n), ranks)


@dataclass
class NdData:
    """Split of [A] and the Schur-type matrix entering the solver."""

    n0: int
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray
    Y: np.ndarray

    @property
    def U_inv_padded(self) -> np.ndarray:
        """diag(U^{-1}, 0) on the full action space."""
        l = self.n0 + self.V.shape[0]
        out = np.zeros((l, l))
        out[:self.n0, :self.n0] = np.linalg.inv(self.U)
        return out


@dataclass
class NdCheck:
    nd: NdData | None
    cond_U: float
    cond_Y: float
    passed: bool
    message: str = ""


def check_nd(A_avg, B_avg, M_avg, n0: int, cond_max: float = 1e12) -> NdCheck:
    """Invertibility of U (leading n0 x n0 of [A]) and of Y."""
    A_avg = np.asarray(A_avg, dtype=float)
    B_avg = np.asarray(B_avg, dtype=float)
    M_avg = np.asarray(M_avg, dtype=float)
    l = A_avg.shape[0]
    if not 0 < n0 <= l:
        raise ValueError(f"n0 must be in 1..{l}")
    U = A_avg[:n0, :n0]
    D = A_avg[:n0, n0:]
    V = A_avg[n0:, n0:]
    cond_U = float(np.linalg.cond(U))
    if not np.isfinite(cond_U) or cond_U > cond_max:
        return NdCheck(None, cond_U, math.inf, False,
                       f"leading minor U is singular or too ill-conditioned "
                       f"(cond={cond_U:.3e})")
    Uinv_pad = np.zeros((l, l))
    Uinv_pad[:n0, :n0] = np.linalg.inv(U)
    Y = M_avg - B_avg.T @ Uinv_pad @ B_avg
    cond_Y = float(np.linalg.cond(Y))
    nd = NdData(n0, U, D, V, Y)
    ok = np.isfinite(cond_Y) and cond_Y <= cond_max
    msg = "" if ok else f"Y is singular or too ill-conditioned (cond={cond_Y:.3e})"
    return NdCheck(nd, cond_U, cond_Y, bool(ok), msg)


@dataclass
class EtaData:
    alpha: float
    rho0: float
    eta: float


def compute_eta(nd: NdData, M_avg, B_avg, sigma0: float, m: int) -> EtaData:
    """Closeness margin eta for the x-dependent parts of M and B.

    alpha = (1+2m)(|Y^-1| + |U^-1| + |Y^-1||U^-1|(2|[B]| + |[B]|^2 |U^-1|)),
    rho0  = (4m/sigma0)(1 + (2m/sigma0)|[M]|)^{2m-1},
    eta   = 2 / (sqrt(rho0^2 + 4 alpha rho0) + rho0),

    all in the operator 2-norm.
    """
    nrm = lambda X: float(np.linalg.norm(X, 2))
    Yi = nrm(np.linalg.inv(nd.Y))
    Ui = nrm(np.linalg.inv(nd.U))
    Bn = nrm(np.asarray(B_avg, dtype=float))
    Mn = nrm(np.asarray(M_avg, dtype=float))
    alpha = (1 + 2 * m) * (Yi + Ui + Yi * Ui * (2 * Bn + Bn ** 2 * Ui))
    rho0 = (4 * m / sigma0) * (1 + (2 * m / sigma0) * Mn) ** (2 * m - 1)
    eta = 2.0 / (math.sqrt(rho0 ** 2 + 4 * alpha * rho0) + rho0)
    return EtaData(alpha, rho0, eta)


@dataclass
class MbCheck:
    dev_A: float
    dev_B: float
    dev_M: float
    eta: float
    passed: bool


def check_mb(A: SeriesMatrix, B: SeriesMatrix, M: SeriesMatrix,
             eta: float, r: float) -> MbCheck:
    """x-dependence of M and B must stay below eta on the strip of width r.

    The deviation of A is reported alongside as a drift diagnostic; only
    M and B enter the pass/fail decision.
    """
    dev_A = A.deviation(r)
    dev_B = B.deviation(r)
    dev_M = M.deviation(r)
    return MbCheck(dev_A, dev_B, dev_M, eta,
                   bool(dev_B < eta and dev_M < eta))
