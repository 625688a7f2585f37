"""Small-divisor sieve and the linearized (homological) equations.

One iteration step removes the solvable part R of the perturbation,

    R = sum over |i|+|j| <= 2, 0 < |k|_1 <= K_+  of  P_kij y^i z^j e^{i<k,x>},

by a generating function

    F = sum over 0 < |k|_1 <= K_+ of
        (f_k0 + <f_k1, y> + <F_k1, z>) e^{i<k,x>}  +  <F_01, z>

plus an action translation y -> y + y*, y* = (Y*, 0).  The coefficient
equations solved here, with omega the toral frequency and [.] the torus
average, are

  (d0)  i<k,omega> f_k0 = P_k00
  (d1)  i<k,omega> f_k1 = P_k10 + A_k y* + sum_j B_{k-j} J F_j1
  (n1)  (i<k,omega> I - [M] J) F_k1
            = sum_{j != k} M_{k-j} J F_j1 + P_k01 + B_k^T y* + M_k J F_01
  (n0)  [M] J F_01 + sum_{j != 0} M_{-j} J F_j1 + [B]^T y* = -P_001
  (y*)  U Y* + proj_{n0} ( [B] J F_01 + sum_{j != 0} B_{-j} J F_j1 )
            = -proj_{n0} P_010

with all mode sums over 0 < |j|_1 <= K_+ and the j = 0 convention
B_k J F_01 absorbed into (d1)'s sum.  When M and B are x-independent the
normal equations decouple mode by mode; otherwise a dense real system
over the coupled modes is assembled.  Both paths are exact on their
domain and agree to roundoff, which the tests pin down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import NdData, NormalForm
from .series import Series, _l1_grid

# Refuse to assemble dense systems beyond this many real unknowns; the
# coupled path is meant for modest mode counts (a saturated two-angle
# ball at K = 32 with two hyperbolic planes needs 8454).
MAX_DENSE_UNKNOWNS = 9000

_TINY_DIVISOR = 1e-14

# Relative floors below which a data mode (against the largest family
# magnitude) or an M/B coupling mode (against the averaged matrix) is not
# worth an unknown of its own.  Leaving such modes out of the closure does
# not hide them: residual_check evaluates the untruncated equations.
_SEED_RTOL = 1e-14
_COUPLER_RTOL = 1e-15


# ----------------------------------------------------------------------
# sieve


@dataclass
class SieveCheck:
    passed: bool
    gamma: float
    tau: float
    K_plus: int
    min_margin: float          # min over k of |<k,omega>| |k|_1^tau
    worst_k: tuple
    min_divisor: float


def _mode_list(n: int, K: int) -> np.ndarray:
    """All k in Z^n with 0 < |k|_1 <= K, as an (N, n) int array."""
    grid = np.indices((2 * K + 1,) * n).reshape(n, -1).T - K
    l1 = np.abs(grid).sum(axis=1)
    return grid[(l1 > 0) & (l1 <= K)]

def sieve(omega, gamma: float, tau: float, K_plus: int) -> SieveCheck:
    """Diophantine condition |<k,omega>| > gamma / |k|_1^tau up to K_plus."""
    omega = np.asarray(omega, dtype=float)
    if K_plus < 1:
        # no modes to test: vacuously Diophantine
        return SieveCheck(True, gamma, tau, K_plus, math.inf, (), math.inf)
    ks = _mode_list(omega.shape[0], K_plus)
    div = np.abs(ks @ omega)
    l1 = np.abs(ks).sum(axis=1).astype(float)
    margin = div * l1 ** tau
    worst = int(np.argmin(margin))
    return SieveCheck(bool(margin[worst] > gamma), gamma, tau, K_plus,
                      float(margin[worst]), tuple(int(v) for v in ks[worst]),
                      float(div.min()))


@dataclass
class SieveResult:
    """Grid sieve over a parameter family."""
    gamma: float
    tau: float
    K_plus: int
    accepted: list = field(default_factory=list)   # (lam, min margin)
    rejected: list = field(default_factory=list)   # (lam, offending k)

    @property
    def fraction_rejected(self) -> float:
        total = len(self.accepted) + len(self.rejected)
        return len(self.rejected) / total if total else 0.0


def sieve_grid(omega_fn, lambdas, gamma: float, tau: float, K_plus: int) -> SieveResult:
    res = SieveResult(gamma, tau, K_plus)
    for lam in lambdas:
        chk = sieve(omega_fn(lam), gamma, tau, K_plus)
        if chk.passed:
            res.accepted.append((np.asarray(lam, dtype=float), chk.min_margin))
        else:
            res.rejected.append((np.asarray(lam, dtype=float), chk.worst_k))
    return res


# ----------------------------------------------------------------------
# generating data


@dataclass
class GeneratingData:
    K_plus: int
    omega: np.ndarray
    f_k0: dict            # k tuple -> complex
    f_k1: dict            # k tuple -> (l,) complex
    F_k1: dict            # k tuple -> (2m,) complex
    F_01: np.ndarray      # (2m,) real
    y_star: np.ndarray    # (l,) real, zeros beyond n0
    n0: int

    def to_series(self, n: int, l: int, m: int, d_max: int, K_max: int) -> Series:
        terms = []
        ey = lambda b: tuple(1 if q == b else 0 for q in range(l))
        ez = lambda c: tuple(1 if q == c else 0 for q in range(2 * m))
        zero_y, zero_z = (0,) * l, (0,) * (2 * m)
        for k, v in self.f_k0.items():
            terms.append((k, zero_y, zero_z, v))
        for k, vec in self.f_k1.items():
            for b in range(l):
                if vec[b] != 0.0:
                    terms.append((k, ey(b), zero_z, vec[b]))
        for k, vec in self.F_k1.items():
            for c in range(2 * m):
                if vec[c] != 0.0:
                    terms.append((k, zero_y, ez(c), vec[c]))
        k0 = (0,) * n
        for c in range(2 * m):
            if self.F_01[c] != 0.0:
                terms.append((k0, zero_y, ez(c), self.F_01[c]))
        return Series.from_terms(n, l, m, d_max, K_max, terms)

    def reality_defect(self) -> float:
        worst = 0.0
        for table in (self.f_k0, self.f_k1, self.F_k1):
            for k, v in table.items():
                mk = tuple(-q for q in k)
                w = table.get(mk, np.zeros_like(v) if isinstance(v, np.ndarray) else 0.0)
                worst = max(worst, float(np.max(np.abs(np.conj(v) - w))))
        return worst


@dataclass
class SolveInfo:
    method: str
    unknowns: int
    cond: float
    residual: float
    modes: int


# ----------------------------------------------------------------------
# family extraction


def _families(R: Series, l: int, m: int):
    """Split R into its degree-(0,1) coefficient tables.

    Returns (P00, P10, P01): arrays over the Fourier grid of R, with
    shapes grid, (l,)+grid and (2m,)+grid.
    """
    shape = (2 * R.K_max + 1,) * R.n
    P00 = np.zeros(shape, dtype=complex)
    P10 = np.zeros((l,) + shape, dtype=complex)
    P01 = np.zeros((2 * m,) + shape, dtype=complex)
    zero = (0,) * (l + 2 * m)
    if zero in R.coeffs:
        P00 = R.coeffs[zero].copy()
    for b in range(l):
        e = tuple(1 if q == b else 0 for q in range(l + 2 * m))
        if e in R.coeffs:
            P10[b] = R.coeffs[e]
    for c in range(2 * m):
        e = tuple(1 if q == l + c else 0 for q in range(l + 2 * m))
        if e in R.coeffs:
            P01[c] = R.coeffs[e]
    return P00, P10, P01


def _grid_value(arr, k, K):
    return arr[(...,) + tuple(int(q) + K for q in k)]


def _lex_positive(k) -> bool:
    for v in k:
        if v:
            return v > 0
    return False


def _grid_index(k, K):
    return tuple(int(q) + K for q in k)


def _shift_slices(q, K):
    """(src, dst) slice tuples so that grid[dst] += other[src] shifts by q."""
    G = 2 * K + 1
    src, dst = [], []
    for qa in q:
        qa = int(qa)
        if qa >= 0:
            src.append(slice(0, max(G - qa, 0)))
            dst.append(slice(min(qa, G), G))
        else:
            src.append(slice(min(-qa, G), G))
            dst.append(slice(0, max(G + qa, 0)))
    return tuple(src), tuple(dst)


def _mode_table(SM, include_zero=False):
    """dict k -> matrix over the nonzero Fourier modes of a SeriesMatrix."""
    return {k: SM.mode(k) for k in SM.nonzero_modes(include_zero)}


def _recenter(arr, K_from, K_to, comp_first=False):
    """Move a family grid to a (2*K_to+1)^n grid, components last."""
    lead = 1 if comp_first else 0
    n = arr.ndim - lead
    c = min(K_from, K_to)
    src = (slice(None),) * lead + tuple(
        slice(K_from - c, K_from + c + 1) for _ in range(n))
    dst = (slice(None),) * lead + tuple(
        slice(K_to - c, K_to + c + 1) for _ in range(n))
    out = np.zeros(arr.shape[:lead] + (2 * K_to + 1,) * n, dtype=arr.dtype)
    out[dst] = arr[src]
    return np.moveaxis(out, 0, -1) if comp_first else out


def _divisor_grid(omega, K, n):
    """<k, omega> over the centered mode grid."""
    ax = np.arange(-K, K + 1, dtype=float)
    dv = np.zeros((2 * K + 1,) * n)
    for a in range(n):
        shp = [1] * n
        shp[a] = 2 * K + 1
        dv = dv + omega[a] * ax.reshape(shp)
    return dv


def _add_blocks(Amat, rows, cols, block):
    """Add one block at many (row, col) offsets; pairs must be distinct."""
    d = block.shape[0]
    rr = np.arange(d)
    Amat[rows[:, None, None] + rr[None, :, None],
         cols[:, None, None] + rr[None, None, :]] += block[None, :, :]


# ----------------------------------------------------------------------
# solve


def assemble_and_solve(N: NormalForm, R: Series, nd: NdData, omega,
                       K_plus: int, method: str = "auto",
                       dump_path=None) -> tuple[GeneratingData, SolveInfo]:
    """Solve the homological equations for R at truncation order K_plus.

    method: "auto" picks the mode-decoupled path when M and B are
    x-independent, otherwise the dense coupled system.  "decoupled" and
    "dense" force a path ("decoupled" raises if M or B carry modes).
    """
    omega = np.asarray(omega, dtype=float)
    l, m = N.l, N.m
    n = R.n
    if m < 1:
        raise ValueError("need at least one hyperbolic plane (m >= 1)")
    J = np.zeros((2 * m, 2 * m))
    J[:m, m:] = np.eye(m)
    J[m:, :m] = -np.eye(m)
    M_avg = N.M.avg()
    B_avg = N.B.avg()
    MJ = M_avg @ J
    M_modes = [k for k in N.M.nonzero_modes() if sum(map(abs, k)) <= K_plus]
    B_modes = [k for k in N.B.nonzero_modes() if sum(map(abs, k)) <= K_plus]
    coupled = bool(M_modes or B_modes)
    if method == "auto":
        method = "dense" if coupled else "decoupled"
    if method == "decoupled" and coupled:
        raise ValueError("decoupled path needs x-independent M and B")

    P00, P10, P01 = _families(R, l, m)
    KR = R.K_max
    center = (KR,) * n

    # forced modes: any data present
    any_data = (P00 != 0.0)
    any_data |= np.any(P10 != 0.0, axis=0)
    any_data |= np.any(P01 != 0.0, axis=0)
    l1 = _l1_grid(n, KR)
    forced = [tuple(int(v) - KR for v in idx)
              for idx in np.argwhere(any_data & (l1 > 0) & (l1 <= K_plus))]

    P001 = np.real(_grid_value(P01, (0,) * n, KR))
    P010 = np.real(_grid_value(P10, (0,) * n, KR))

    dot = lambda k: float(np.dot(k, omega))

    def divisor(k):
        d = dot(k)
        if abs(d) < _TINY_DIVISOR:
            raise ArithmeticError(
                f"vanishing divisor <k,omega> at k={k}; sieve should have "
                f"rejected this frequency")
        return d

    if method == "decoupled":
        g, info = _solve_decoupled(N, nd, omega, forced, P00, P10, P01,
                                   P001, P010, KR, K_plus, J, MJ, B_avg,
                                   divisor)
    else:
        g, info = _solve_dense(N, nd, omega, forced, P00, P10, P01,
                               P001, P010, KR, K_plus, J, MJ, B_avg,
                               divisor, dump_path)

    rep = residual_check(g, N, R, omega, K_plus)
    info.residual = rep.rel
    return g, info


def _symmetrize_pairs(table):
    """Average k with -k conjugates; exact reality for hermitian input."""
    done = set()
    for k in list(table):
        mk = tuple(-q for q in k)
        if k in done or mk not in table:
            continue
        a, b = table[k], np.conj(table[mk])
        avg = 0.5 * (a + b)
        table[k] = avg
        table[mk] = np.conj(avg)
        done.add(k)
        done.add(mk)


def _solve_decoupled(N, nd, omega, forced, P00, P10, P01, P001, P010,
                     KR, K_plus, J, MJ, B_avg, divisor):
    l, m = N.l, N.m
    n0 = nd.n0
    eye = np.eye(2 * m)

    # normal directions, mode by mode
    F_k1 = {}
    conds = []
    if forced:
        mats = np.stack([1j * divisor(k) * eye - MJ for k in forced])
        rhs = np.stack([_grid_value(P01, k, KR) for k in forced])
        sols = np.linalg.solve(mats, rhs[:, :, None])[:, :, 0]
        conds = np.linalg.cond(mats).tolist()
        for k, sol in zip(forced, sols):
            if np.any(sol != 0.0):
                F_k1[k] = sol
    _symmetrize_pairs(F_k1)

    # averaged normal direction and action translation, one small system:
    #   [ MJ            [B]^T[:, :n0] ] [F_01]   [ -P001 ]
    #   [ ([B] J)[:n0]  U             ] [ Y*  ] = [ -P010[:n0] ]
    S = np.zeros((2 * m + n0, 2 * m + n0))
    S[:2 * m, :2 * m] = MJ
    S[:2 * m, 2 * m:] = B_avg.T[:, :n0]
    S[2 * m:, :2 * m] = (B_avg @ J)[:n0, :]
    S[2 * m:, 2 * m:] = nd.U
    rhs0 = np.concatenate([-P001, -P010[:n0]])
    sol0 = np.linalg.solve(S, rhs0)
    conds.append(float(np.linalg.cond(S)))
    F_01 = sol0[:2 * m]
    y_star = np.zeros(l)
    y_star[:n0] = sol0[2 * m:]

    # tangent directions by back substitution; A may carry modes
    A_modes = [k for k in N.A.nonzero_modes() if sum(map(abs, k)) <= K_plus]
    f_modes = set(forced)
    if np.any(y_star):
        f_modes.update(A_modes)
    f_k0, f_k1 = {}, {}
    BJ = B_avg @ J
    for k in sorted(f_modes):
        d = 1j * divisor(k)
        c00 = _grid_value(P00, k, KR) if sum(map(abs, k)) <= KR else 0.0
        if c00 != 0.0:
            f_k0[k] = c00 / d
        vec = np.array(_grid_value(P10, k, KR)) if sum(map(abs, k)) <= KR \
            else np.zeros(l, dtype=complex)
        vec = vec + N.A.mode(k) @ y_star
        if k in F_k1:
            vec = vec + BJ @ F_k1[k]
        if np.any(vec != 0.0):
            f_k1[k] = vec / d
    _symmetrize_pairs(f_k0)
    _symmetrize_pairs(f_k1)

    g = GeneratingData(K_plus, omega, f_k0, f_k1, F_k1, F_01, y_star, n0)
    info = SolveInfo("decoupled", 2 * m * max(len(forced), 1) + 2 * m + n0,
                     float(max(conds)) if conds else 1.0, math.nan,
                     len(forced))
    return g, info


def _cplx_block(C):
    """Real 2x2-block encoding of u -> C u for split (Re u, Im u)."""
    return np.block([[C.real, -C.imag], [C.imag, C.real]])


def _conj_block(C):
    """Real encoding of u -> C conj(u)."""
    return np.block([[C.real, C.imag], [C.imag, -C.real]])


def _solve_dense(N, nd, omega, forced, P00, P10, P01, P001, P010,
                 KR, K_plus, J, MJ, B_avg, divisor, dump_path):
    l, m = N.l, N.m
    n = N.A.n
    n0 = nd.n0
    two_m = 2 * m
    K = K_plus
    shape = (2 * K + 1,) * n

    Mnz = _mode_table(N.M)
    Bnz = _mode_table(N.B)

    # Unknowns are kept only at modes that matter at the residual scale:
    # normal-family data P01 above _SEED_RTOL relative to the data norm,
    # plus M/B modes above _COUPLER_RTOL (the y*/F_01 feedback can excite
    # those), closed under the significant M couplers.  Whatever is left
    # out stays visible to residual_check, which evaluates the full
    # system, so the 1e-10 gate still judges the complete equations.
    sc = max(float(np.abs(P00).max(initial=0.0)),
             float(np.abs(P10).max(initial=0.0)),
             float(np.abs(P01).max(initial=0.0)), 1e-300)
    Mref = max(1.0, float(np.linalg.norm(N.M.avg(), 2)))
    Bref = max(1.0, float(np.linalg.norm(B_avg, 2)) if B_avg.size else 1.0)
    Msig = [q for q, Mq in Mnz.items()
            if sum(map(abs, q)) <= K
            and np.linalg.norm(Mq, 2) > _COUPLER_RTOL * Mref]
    Bsig = [q for q, Bq in Bnz.items()
            if sum(map(abs, q)) <= K
            and np.linalg.norm(Bq, 2) > _COUPLER_RTOL * Bref]

    l1 = _l1_grid(n, K)
    ball = (l1 > 0) & (l1 <= K)
    l1R = _l1_grid(n, KR)
    p01mag = np.abs(P01).max(axis=0) if P01.size else np.zeros((2 * KR + 1,) * n)
    strong = (p01mag > _SEED_RTOL * sc) & (l1R > 0) & (l1R <= K)
    seen = np.zeros(shape, dtype=bool)
    seeds = {tuple(int(v) - KR for v in idx) for idx in np.argwhere(strong)}
    seeds.update(Msig)
    seeds.update(Bsig)
    for k in seeds:
        seen[_grid_index(k, K)] = True
    couplers = np.array(sorted(Msig), dtype=int).reshape(-1, n)
    frontier = np.array(sorted(seeds), dtype=int).reshape(-1, n)
    while frontier.size and couplers.size:
        cand = (frontier[:, None, :] + couplers[None, :, :]).reshape(-1, n)
        cand = cand[np.all(np.abs(cand) <= K, axis=1)]
        idx = tuple((cand + K).T)
        cand = np.unique(cand[ball[idx] & ~seen[idx]], axis=0)
        if cand.size:
            seen[tuple((cand + K).T)] = True
        frontier = cand
    # keep conjugate pairs together
    seen |= seen[(slice(None, None, -1),) * n]
    reps = sorted(tuple(int(c) - K for c in idx)
                  for idx in np.argwhere(seen))
    reps = [k for k in reps if _lex_positive(k)]
    R_count = len(reps)
    nunk = 4 * m * R_count + two_m + n0
    if nunk > MAX_DENSE_UNKNOWNS:
        raise ValueError(
            f"dense homological system would need {nunk} unknowns "
            f"(> {MAX_DENSE_UNKNOWNS}); reduce K_plus or use x-independent "
            f"M and B")

    pos = {k: 4 * m * i for i, k in enumerate(reps)}
    off_F01 = 4 * m * R_count
    off_Y = off_F01 + two_m
    Amat = np.zeros((nunk, nunk))
    rhs = np.zeros(nunk)

    krep = np.array(reps, dtype=int).reshape(-1, n)
    pos_arr = 4 * m * np.arange(R_count)
    posg = np.full(shape, -1, dtype=np.int64)
    if R_count:
        posg[tuple((krep + K).T)] = pos_arr
    P01g = _recenter(P01, KR, K, comp_first=True)

    # diagonal blocks, the realified (i<k,omega> I - [M]J)
    dvs = krep @ omega
    if np.any(np.abs(dvs) < _TINY_DIVISOR):
        worst = reps[int(np.argmin(np.abs(dvs)))]
        raise ArithmeticError(
            f"vanishing divisor <k,omega> at k={worst}; sieve should have "
            f"rejected this frequency")
    if R_count:
        eye = np.eye(two_m)
        diag = np.zeros((R_count, 4 * m, 4 * m))
        diag[:, :two_m, :two_m] = -MJ
        diag[:, two_m:, two_m:] = -MJ
        diag[:, :two_m, two_m:] = -dvs[:, None, None] * eye
        diag[:, two_m:, :two_m] = dvs[:, None, None] * eye
        rr = np.arange(4 * m)
        Amat[pos_arr[:, None, None] + rr[None, :, None],
             pos_arr[:, None, None] + rr[None, None, :]] += diag

        # rhs on the mode rows
        bvals = P01g[tuple((krep + K).T)]
        cc = np.arange(two_m)
        rhs[pos_arr[:, None] + cc[None, :]] = bvals.real
        rhs[pos_arr[:, None] + two_m + cc[None, :]] = bvals.imag

    # mode-to-mode couplings from the x-dependent part of M; the block
    # depends only on the mode difference, so scatter it per coupler
    for q, Mq in Mnz.items():
        Cq = -(Mq @ J)
        js = krep - np.asarray(q, dtype=int)
        inb = np.all(np.abs(js) <= K, axis=1)
        if not np.any(inb):
            continue
        jidx = js[inb] + K
        pj = posg[tuple(jidx.T)]
        pnj = posg[tuple((2 * K - jidx).T)]
        kpos = pos_arr[inb]
        selr = pj >= 0
        if np.any(selr):
            _add_blocks(Amat, kpos[selr], pj[selr], _cplx_block(Cq))
        selc = (pj < 0) & (pnj >= 0)
        if np.any(selc):
            _add_blocks(Amat, kpos[selc], pnj[selc], _conj_block(Cq))

    # F_01 and y* columns on the mode rows
    for q, Mq in Mnz.items():
        row = pos.get(q)
        if row is None:
            continue
        CM = -(Mq @ J)
        Amat[row:row + two_m, off_F01:off_F01 + two_m] += CM.real
        Amat[row + two_m:row + 4 * m, off_F01:off_F01 + two_m] += CM.imag
    for q, Bq in Bnz.items():
        row = pos.get(q)
        if row is None:
            continue
        CB = -(Bq.T[:, :n0])
        Amat[row:row + two_m, off_Y:off_Y + n0] += CB.real
        Amat[row + two_m:row + 4 * m, off_Y:off_Y + n0] += CB.imag

    # averaged normal equation; rows are real, keep the real half of the
    # complex action on each mode column
    Amat[off_F01:off_F01 + two_m, off_F01:off_F01 + two_m] += MJ
    Amat[off_F01:off_F01 + two_m, off_Y:off_Y + n0] += B_avg.T[:, :n0]
    for q, Mq in Mnz.items():
        C = Mq @ J
        mq = tuple(-c for c in q)
        if mq in pos:
            Amat[off_F01:off_F01 + two_m, pos[mq]:pos[mq] + 4 * m] += \
                _cplx_block(C)[:two_m, :]
        elif q in pos:
            Amat[off_F01:off_F01 + two_m, pos[q]:pos[q] + 4 * m] += \
                _conj_block(C)[:two_m, :]
    rhs[off_F01:off_F01 + two_m] = -P001

    # action translation
    Amat[off_Y:off_Y + n0, off_Y:off_Y + n0] += nd.U
    Amat[off_Y:off_Y + n0, off_F01:off_F01 + two_m] += (B_avg @ J)[:n0, :]
    for q, Bq in Bnz.items():
        C = Bq @ J
        mq = tuple(-c for c in q)
        if mq in pos:
            Amat[off_Y:off_Y + n0, pos[mq]:pos[mq] + 4 * m] += \
                _cplx_block(C)[:n0, :]
        elif q in pos:
            Amat[off_Y:off_Y + n0, pos[q]:pos[q] + 4 * m] += \
                _conj_block(C)[:n0, :]
    rhs[off_Y:off_Y + n0] = -P010[:n0]

    if dump_path is not None:
        with open(dump_path, "w") as fh:
            fh.write(f"# dense homological system, {nunk} unknowns, "
                     f"{R_count} mode pairs\n")
            fh.write("# row col value\n")
            for r, c in np.argwhere(Amat != 0.0):
                fh.write(f"{r} {c} {Amat[r, c]:.17g}\n")
            fh.write("# rhs: row value\n")
            for r in range(nunk):
                fh.write(f"{r} {rhs[r]:.17g}\n")

    sol = np.linalg.solve(Amat, rhs)
    cond = float(np.linalg.cond(Amat)) if nunk <= 2000 else math.nan

    F_k1 = {}
    for k in reps:
        v = sol[pos[k]:pos[k] + two_m] + 1j * sol[pos[k] + two_m:pos[k] + 4 * m]
        if np.any(v != 0.0):
            F_k1[k] = v
            F_k1[tuple(-q for q in k)] = np.conj(v)
    F_01 = sol[off_F01:off_F01 + two_m]
    y_star = np.zeros(l)
    y_star[:n0] = sol[off_Y:off_Y + n0]

    # tangent back-substitution over every mode the data can excite
    f_k0, f_k1 = {}, {}
    BJ_modes = [(q, Bq @ J) for q, Bq in
                _mode_table(N.B, include_zero=True).items()]
    A_modes = [k for k in N.A.nonzero_modes(include_zero=True)
               if sum(map(abs, k)) <= K_plus]
    f_modes = set(forced)
    if np.any(y_star):
        f_modes.update(k for k in A_modes if any(k))
    for (q, BJq) in BJ_modes:
        for j in list(F_k1) + ([(0,) * n] if np.any(F_01) else []):
            k = tuple(a + b for a, b in zip(q, j))
            if 0 < sum(map(abs, k)) <= K_plus:
                f_modes.add(k)
    for k in sorted(f_modes):
        d = 1j * divisor(k)
        c00 = _grid_value(P00, k, KR) if sum(map(abs, k)) <= KR else 0.0
        if c00 != 0.0:
            f_k0[k] = c00 / d
        vec = np.array(_grid_value(P10, k, KR), dtype=complex) \
            if sum(map(abs, k)) <= KR else np.zeros(l, dtype=complex)
        Ak = N.A.mode(k) if sum(map(abs, k)) <= N.A.K_max else np.zeros((l, l))
        vec = vec + Ak @ y_star
        for (q, BJq) in BJ_modes:
            j = tuple(a - b for a, b in zip(k, q))
            if j in F_k1:
                vec = vec + BJq @ F_k1[j]
            elif not any(j):
                vec = vec + BJq @ F_01
        if np.any(vec != 0.0):
            f_k1[k] = vec / d
    _symmetrize_pairs(f_k0)
    _symmetrize_pairs(f_k1)

    g = GeneratingData(K_plus, omega, f_k0, f_k1, F_k1, F_01, y_star, n0)
    info = SolveInfo("dense", nunk, cond, math.nan, R_count)
    return g, info


# ----------------------------------------------------------------------
# residual


@dataclass
class ResidualReport:
    max_abs: float
    rel: float
    scale: float
    per_family: dict


def residual_check(g: GeneratingData, N: NormalForm, R: Series, omega,
                   K_plus: int) -> ResidualReport:
    """Substitute the solved coefficients back into every equation.

    Full-sum evaluation, independent of the solve path: the solution and
    data live on the (2*K_plus+1)^n mode grid and the coupling sums are
    applied as shifted-grid adds, one per nonzero coupling mode.  The
    relative residual is measured against the largest data magnitude over
    the punctured ball 0 < |k| <= K_plus, which covers every forced mode,
    so an all-zero (wrong) solution cannot pass.
    """
    omega = np.asarray(omega, dtype=float)
    l, m = N.l, N.m
    n = N.A.n
    two_m = 2 * m
    n0 = g.n0
    K = K_plus
    shape = (2 * K + 1,) * n
    J = np.zeros((two_m, two_m))
    J[:m, m:] = np.eye(m)
    J[m:, :m] = -np.eye(m)
    M_avg, B_avg = N.M.avg(), N.B.avg()
    MJ = M_avg @ J

    P00r, P10r, P01r = _families(R, l, m)
    P00 = _recenter(P00r, R.K_max, K)
    P10 = _recenter(P10r, R.K_max, K, comp_first=True)
    P01 = _recenter(P01r, R.K_max, K, comp_first=True)

    f0 = np.zeros(shape, dtype=complex)
    for k, v in g.f_k0.items():
        f0[_grid_index(k, K)] = v
    f1 = np.zeros(shape + (l,), dtype=complex)
    for k, v in g.f_k1.items():
        f1[_grid_index(k, K)] = v
    F1 = np.zeros(shape + (two_m,), dtype=complex)
    for k, v in g.F_k1.items():
        F1[_grid_index(k, K)] = v

    Mnz = _mode_table(N.M)
    Bnz = _mode_table(N.B, include_zero=True)
    Anz = _mode_table(N.A, include_zero=True)
    dv = 1j * _divisor_grid(omega, K, n)
    l1 = _l1_grid(n, K)
    mask = (l1 > 0) & (l1 <= K)
    center = _grid_index((0,) * n, K)

    def inside(q):
        return all(abs(int(c)) <= K for c in q)

    errs = {}
    # (d0)
    errs["f_k0"] = float(np.abs((dv * f0 - P00)[mask]).max(initial=0.0))

    # (d1): the B coupling acts as sum_j B_{k-j} J F_j1, plus the F_01 and
    # y* source terms at the coupling modes themselves
    lhs = dv[..., None] * f1 - P10
    for q, Bq in Bnz.items():
        BJq = Bq @ J
        src, dst = _shift_slices(q, K)
        lhs[dst] -= F1[src] @ BJq.T
        if inside(q):
            lhs[_grid_index(q, K)] -= BJq @ g.F_01
    if np.any(g.y_star):
        for q, Aq in Anz.items():
            if inside(q):
                lhs[_grid_index(q, K)] -= Aq @ g.y_star
    errs["f_k1"] = float(np.abs(lhs[mask]).max(initial=0.0))

    # (n1)
    lhsF = dv[..., None] * F1 - F1 @ MJ.T - P01
    for q, Mq in Mnz.items():
        MJq = Mq @ J
        src, dst = _shift_slices(q, K)
        lhsF[dst] -= F1[src] @ MJq.T
        if inside(q):
            lhsF[_grid_index(q, K)] -= MJq @ g.F_01
    if np.any(g.y_star):
        for q, Bq in Bnz.items():
            if inside(q):
                lhsF[_grid_index(q, K)] -= Bq.T @ g.y_star
    errs["F_k1"] = float(np.abs(lhsF[mask]).max(initial=0.0))

    # (n0), the k = 0 row of the normal family
    acc = np.zeros(two_m, dtype=complex)
    for q, Mq in Mnz.items():
        mq = tuple(-c for c in q)
        if inside(mq):
            acc += Mq @ J @ F1[_grid_index(mq, K)]
    P001 = np.real(P01[center])
    lhs0 = MJ @ g.F_01 + acc + B_avg.T @ g.y_star + P001
    errs["F_01"] = float(np.abs(lhs0).max()) if two_m else 0.0

    # (y*): only the rows selected by the leading projector
    acc = np.zeros(l, dtype=complex)
    for q, Bq in Bnz.items():
        if not any(q):
            continue
        mq = tuple(-c for c in q)
        if inside(mq):
            acc += Bq @ J @ F1[_grid_index(mq, K)]
    P010 = np.real(P10[center])
    A_avg = N.A.avg()
    lhs_y = A_avg[:n0, :n0] @ g.y_star[:n0] \
        + P010[:n0] + acc[:n0] + (B_avg @ J)[:n0] @ g.F_01
    errs["y_star"] = float(np.abs(lhs_y).max()) if n0 else 0.0

    scale = max(float(np.abs(P00).max(initial=0.0)),
                float(np.abs(P10).max(initial=0.0)),
                float(np.abs(P01).max(initial=0.0)),
                float(np.abs(g.y_star).max(initial=0.0)),
                1e-300)
    worst = max(errs.values())
    return ResidualReport(worst, worst / scale, scale, errs)
