"""One step of the quadratic iteration and its domain bookkeeping.

Each step solves the homological equations for the low-order part R of
the perturbation, applies the time-1 flow of the generating function F
followed by the action translation y -> y + y*, reads the new normal
form off the transformed Hamiltonian and keeps everything else as the
next perturbation.  The analytic domain shrinks on a fixed schedule:

    eps+ = eps^{10/9}       gamma+ = gamma0/4 + gamma/2
    r+   = r0/4 + r/2       s+     = (1/8) eps^{1/3} s
    K+   = (floor(log 1/s) + 1)^{a*+2}

with a hard cap on K+ at desk scale (the uncapped value only enters the
tail condition H1, where larger is stricter in the right direction).
The smallness chain (H5, H6 and the composite bound Delta) is evaluated
with unit constants and recorded per step as a diagnostic; it is far too
pessimistic to gate a numerical run and is not used for control flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import series
from .homological import assemble_and_solve, sieve
from .model import NormalForm, ProblemInstance, check_nd
from .series import Series, TailMeter, sup_norm
from .structure import PoissonStructure, bracket


@dataclass
class KamParams:
    """Numerical knobs of the iteration."""

    gamma0: float = 0.05
    tau: float = 2.0
    sigma0: float = 1.0
    d_max: int = 4
    K_policy: str = "paper_schedule"   # or "iteration_table"
    a_star: int = 7
    lie_order: int = 4
    tol_residual: float = 1e-10
    tol_stop: float = 1e-12
    nu_max: int = 12
    r0: float = 1.0
    s0: float | None = None            # None: self-consistent from |P|
    K_hard: int = 32
    eps_cap: float = 0.9
    tol_torus: float = 1e-9
    cond_max: float = 1e12

    def __post_init__(self):
        if self.K_policy not in ("paper_schedule", "iteration_table"):
            raise ValueError(f"unknown K_policy {self.K_policy!r}")
        if not 0 < self.eps_cap < 1:
            raise ValueError("eps_cap must lie in (0, 1)")


@dataclass
class KamState:
    nu: int
    r: float
    s: float
    gamma: float
    eps: float
    K: int
    N: NormalForm
    P: Series
    transform_log: list = field(default_factory=list)   # (GeneratingData, y_star)
    diagnostics: list = field(default_factory=list)


class StepError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SieveFailed(StepError):
    pass


class SolverFailed(StepError):
    pass


class NonContraction(StepError):
    pass


@dataclass
class ScheduleUpdate:
    eps_p: float
    r_p: float
    s_p: float
    gamma_p: float
    K_raw: int
    K_eff: int
    h1: float
    h1_ok: bool
    gamma_sum_val: float
    zeta: float


def update_params(state: KamState, params: KamParams, n: int) -> ScheduleUpdate:
    """Advance the domain schedule one step and evaluate the tail checks."""
    if state.s <= 0:
        raise ValueError("strip parameter s must be positive")
    if state.eps >= 1:
        raise ValueError("eps must be below 1 for the schedule to contract")
    eps_p = state.eps ** (10.0 / 9.0)
    gamma_p = params.gamma0 / 4.0 + state.gamma / 2.0
    r_p = params.r0 / 4.0 + state.r / 2.0
    s_p = 0.125 * state.eps ** (1.0 / 3.0) * state.s
    base = math.floor(math.log(1.0 / state.s)) + 1
    expo = params.a_star + 2 if params.K_policy == "paper_schedule" else 3
    K_raw = max(int(base) ** expo, 1)
    K_eff = min(K_raw, params.K_hard)
    gap = state.r - r_p
    h1 = series.h1_integral(K_raw, n, gap)
    Gamma = series.gamma_sum(K_eff, n, params.tau, gap)
    zeta = series.zeta_factor(K_eff, n, params.tau, gap)
    return ScheduleUpdate(eps_p, r_p, s_p, gamma_p, K_raw, K_eff,
                          h1, bool(h1 <= state.eps), Gamma, zeta)


def lie_transform(H: Series, F: Series, S: PoissonStructure, order: int,
                  d_cap: int, K_cap: int, meter: TailMeter | None = None):
    """exp(ad_F) H truncated at the given order.

    Returns (transformed, last_term); the last term's size at the target
    domain is the caller's tail estimate for the Lie series.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    acc = H
    term = H
    for j in range(1, order + 1):
        term = series.scale(bracket(term, F, S, d_cap, K_cap, meter), 1.0 / j)
        acc = series.add(acc, term)
        if term.is_zero():
            break
    return acc, term


def torus_metric(P: Series) -> float:
    """Unweighted size of the families that move the torus itself.

    Sums |P_k00| |k|_1 (angle gradient on the torus), |P_k10| and
    |P_k01| over all modes; this is what the invariance residual of the
    reconstructed embedding sees, independent of the shrinking domain
    weights.
    """
    total = 0.0
    l1 = series._l1_grid(P.n, P.K_max)
    for e, g in P.coeffs.items():
        deg = sum(e)
        if deg == 0:
            total += float((np.abs(g) * l1).sum())
        elif deg == 1:
            total += float(np.abs(g).sum())
    return total


def split_normal_form(Hplus: Series, N_old: NormalForm, n0: int):
    """Read the new normal form off a transformed Hamiltonian.

    The constant and the quadratic blocks are taken from H+ wholesale
    (all Fourier modes); the linear action coefficient keeps its first
    n0 components bitwise from the old Omega, as the translation step
    already cancelled their update up to the solver residual, which
    stays in P+.  The degree >= 3 remainder h is carried over unchanged;
    whatever the transformation did to it stays in P+ as well.
    """
    from .model import SeriesMatrix

    l, m = N_old.l, N_old.m
    n = Hplus.n
    K = Hplus.K_max
    width = l + 2 * m
    center = (K,) * n
    shape = (2 * K + 1,) * n

    def grid_of(e):
        g = Hplus.coeffs.get(e)
        return g if g is not None else np.zeros(shape, dtype=complex)

    e_plus = float(grid_of((0,) * width)[center].real)

    lin = np.array([grid_of(tuple(1 if q == b else 0 for q in range(width)))[center].real
                    for b in range(l)])
    Omega_plus = np.concatenate([N_old.Omega[:n0], lin[n0:]]) if n0 < l \
        else N_old.Omega.copy()

    A_g = np.zeros((l, l) + shape, dtype=complex)
    B_g = np.zeros((l, 2 * m) + shape, dtype=complex)
    M_g = np.zeros((2 * m, 2 * m) + shape, dtype=complex)
    for e, g in Hplus.coeffs.items():
        if sum(e) != 2:
            continue
        iy, jz = e[:l], e[l:]
        ny, nz = sum(iy), sum(jz)
        if ny == 2:
            idx = [b for b in range(l) for _ in range(iy[b])]
            r, c = idx[0], idx[1]
            if r == c:
                A_g[r, c] += 2.0 * g
            else:
                A_g[r, c] += g
                A_g[c, r] += g
        elif ny == 1 and nz == 1:
            r = next(b for b in range(l) if iy[b])
            c = next(q for q in range(2 * m) if jz[q])
            B_g[r, c] += g
        else:
            idx = [q for q in range(2 * m) for _ in range(jz[q])]
            r, c = idx[0], idx[1]
            if r == c:
                M_g[r, c] += 2.0 * g
            else:
                M_g[r, c] += g
                M_g[c, r] += g

    N_plus = NormalForm(
        e=e_plus,
        Omega=Omega_plus,
        A=SeriesMatrix(n, K, A_g),
        B=SeriesMatrix(n, K, B_g),
        M=SeriesMatrix(n, K, M_g),
        h=N_old.h,
    )
    P_plus = series.subtract(Hplus, N_plus.to_series(Hplus.d_max, K))
    # the quadratic part cancels exactly; drop the explicit zero grids
    P_plus = Series(P_plus.n, P_plus.l, P_plus.m, P_plus.d_max, P_plus.K_max,
                    {e: g for e, g in P_plus.coeffs.items() if sum(e) != 2})
    return N_plus, P_plus


def kam_step(state: KamState, inst: ProblemInstance, params: KamParams) -> KamState:
    """One full iteration step; raises StepError subclasses on failure."""
    S = inst.structure
    n, l, m = S.n, S.l, S.m
    N = state.N
    omega = S.toral_frequency(N.Omega)

    sched = update_params(state, params, n)
    sv = sieve(omega, state.gamma, params.tau, sched.K_eff)
    diag = {
        "nu": state.nu,
        "r": state.r, "s": state.s, "gamma": state.gamma,
        "eps_sched": state.eps,
        "K": sched.K_eff, "K_raw": sched.K_raw,
        "h1": sched.h1, "H1_ok": sched.h1_ok,
        "sieve_margin": sv.min_margin / state.gamma if state.gamma > 0 else math.inf,
    }
    if not sv.passed:
        raise SieveFailed(
            f"small divisor at k={sv.worst_k}: margin {sv.min_margin:.3e} "
            f"<= gamma {state.gamma:.3e}", diag)

    ndchk = check_nd(N.A.avg(), N.B.avg(), N.M.avg(), inst.n0, params.cond_max)
    if not ndchk.passed:
        raise StepError(f"nondegeneracy lost at step {state.nu}: {ndchk.message}",
                        diag)

    R = series.truncate_R(state.P, sched.K_eff)
    g, info = assemble_and_solve(N, R, ndchk.nd, omega, sched.K_eff)
    diag.update(cond=info.cond, solver=info.method, unknowns=info.unknowns,
                residual=info.residual)
    if not np.isfinite(info.residual) or info.residual > params.tol_residual:
        raise SolverFailed(
            f"homological residual {info.residual:.3e} exceeds "
            f"{params.tol_residual:.1e}", diag)

    F = g.to_series(n, l, m, d_max=1, K_max=sched.K_eff)
    meter = TailMeter()
    H = series.add(N.to_series(params.d_max, params.K_hard), state.P)
    Hflow, last = lie_transform(H, F, S, params.lie_order,
                                params.d_max, params.K_hard, meter)
    Hplus = series.taylor_shift_y(Hflow, g.y_star).hermitianized()
    N_plus, P_plus = split_normal_form(Hplus, N, inst.n0)

    norm_P = sup_norm(state.P, state.r, state.s)
    norm_Pp = sup_norm(P_plus, sched.r_p, sched.s_p)
    eps_measured = norm_Pp / (sched.gamma_p ** (n + 1) * sched.s_p ** 2)
    Delta = (state.s ** 3 * state.eps ** 2 * sched.zeta ** 2
             + state.gamma ** (n + 1) * state.s ** 2 * state.eps ** 2 * sched.zeta ** 2
             + sched.s_p * state.s ** 2 * state.eps * sched.zeta)
    H5_ok = (state.gamma ** (n + 1) * state.s * state.eps * sched.zeta
             * sched.K_eff ** (params.tau + 1) < state.gamma - sched.gamma_p)
    H6_ok = Delta <= sched.gamma_p ** (n + 1) * sched.s_p ** 2 * sched.eps_p
    diag.update(
        norm_P=norm_P, norm_Pplus=norm_Pp,
        eps_measured=eps_measured,
        Delta_formula=Delta, H5_ok=bool(H5_ok), H6_ok=bool(H6_ok),
        lie_tail=sup_norm(last, sched.r_p, sched.s_p),
        product_tail=meter.total,
        torus_metric=torus_metric(P_plus),
        y_star=[float(v) for v in g.y_star],
        Omega_drift=float(np.abs(N_plus.Omega - N.Omega).max()),
        reality_defect=P_plus.reality_defect(),
    )

    if norm_Pp > max(norm_P, params.tol_stop):
        raise NonContraction(
            f"step {state.nu} did not contract: |P+| = {norm_Pp:.3e} "
            f"vs |P| = {norm_P:.3e}", diag)

    return KamState(
        nu=state.nu + 1,
        r=sched.r_p, s=sched.s_p, gamma=sched.gamma_p, eps=sched.eps_p,
        K=sched.K_eff,
        N=N_plus, P=P_plus,
        transform_log=state.transform_log + [(g, g.y_star.copy())],
        diagnostics=state.diagnostics + [diag],
    )


def initial_state(inst: ProblemInstance, params: KamParams) -> KamState:
    """Starting domain: r = r0, s self-consistent with the measured |P|.

    The textbook coupling s0 = (gamma0/2)^{n+1} eps0^{5/9} has no finite
    fixed point once eps is measured from |P| (the measured value blows
    past 1 for any interesting perturbation), so eps0 is clamped at
    eps_cap and the coupling is iterated a few rounds below the clamp;
    the raw measured value is recorded in the first diagnostics entry.
    """
    n = inst.structure.n
    eps0 = params.eps_cap
    s0 = params.s0
    eps_raw = math.nan
    if s0 is None:
        for _ in range(3):
            s0 = (params.gamma0 / 2.0) ** (n + 1) * eps0 ** (5.0 / 9.0)
            norm = sup_norm(inst.P, params.r0, s0)
            eps_raw = norm / (params.gamma0 ** (n + 1) * s0 ** 2)
            if eps_raw == 0.0:
                break
            eps0 = min(params.eps_cap, eps_raw)
    diag = {
        "nu": -1, "event": "init", "r": params.r0, "s": s0,
        "gamma": params.gamma0, "eps_sched": eps0, "eps_measured": eps_raw,
        "norm_P": sup_norm(inst.P, params.r0, s0),
    }
    return KamState(nu=0, r=params.r0, s=float(s0), gamma=params.gamma0,
                    eps=eps0, K=0, N=inst.normal_form, P=inst.P,
                    diagnostics=[diag])
