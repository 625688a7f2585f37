"""End-to-end runs: iterate to convergence, rebuild the torus, measure.

run_point drives the step loop for one parameter value and classifies
the outcome; reconstruct_embedding composes the per-step coordinate
changes to pull the final-coordinates torus {y = 0, z = 0} back to the
original variables; measure_excluded estimates how much of a parameter
box the Diophantine sieve removes as a function of gamma.
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .kamstep import (KamParams, KamState, NonContraction, SieveFailed,
                      SolverFailed, StepError, initial_state, kam_step,
                      torus_metric)
from .model import ProblemInstance, check_hyperbolicity, check_nd
from .series import sup_norm
from .structure import FieldEvaluator


@dataclass
class TorusResult:
    lam: np.ndarray | None
    status: str                      # converged | sieved_out | diverged | check_failed
    Omega_inf: np.ndarray | None
    omega_inf: np.ndarray | None
    drift: np.ndarray | None
    final_residual: float
    steps: int
    diagnostics: list = field(default_factory=list)
    embedding: dict | None = None
    message: str = ""
    state: KamState | None = None    # full final state, not serialized


def run_point(inst: ProblemInstance, params: KamParams,
              want_embedding: bool = False, embedding_grid: int = 32,
              keep_state: bool = True) -> TorusResult:
    """Iterate one parameter point to convergence or failure."""
    S = inst.structure
    Omega0 = inst.normal_form.Omega.copy()

    hyp = check_hyperbolicity(inst.normal_form.M.avg(), params.sigma0)
    ndc = check_nd(inst.normal_form.A.avg(), inst.normal_form.B.avg(),
                   inst.normal_form.M.avg(), inst.n0, params.cond_max)
    if not (hyp.passed and ndc.passed):
        msg = "; ".join(filter(None, [
            "" if hyp.passed else
            f"hyperbolicity margin {hyp.min_abs_re:.3e} < sigma0 {params.sigma0}",
            ndc.message]))
        return TorusResult(inst.lam, "check_failed", None, None, None,
                           math.nan, 0, message=msg)

    st = initial_state(inst, params)
    status = "diverged"
    message = ""
    while True:
        converged = (sup_norm(st.P, st.r, st.s) < params.tol_stop
                     and torus_metric(st.P) < params.tol_torus)
        if converged:
            status = "converged"
            break
        if st.nu >= params.nu_max:
            status = "diverged"
            message = f"no convergence within nu_max={params.nu_max} steps"
            break
        try:
            st = kam_step(st, inst, params)
        except SieveFailed as exc:
            status, message = "sieved_out", str(exc)
            st.diagnostics.append(exc.diagnostics)
            break
        except (NonContraction, SolverFailed, StepError) as exc:
            status, message = "diverged", str(exc)
            st.diagnostics.append(exc.diagnostics)
            break

    Omega_inf = st.N.Omega.copy()
    res = TorusResult(
        lam=inst.lam,
        status=status,
        Omega_inf=Omega_inf,
        omega_inf=S.toral_frequency(Omega_inf),
        drift=Omega_inf - Omega0,
        final_residual=sup_norm(st.P, st.r, st.s),
        steps=st.nu,
        diagnostics=st.diagnostics,
        message=message,
        state=st if keep_state else None,
    )
    if want_embedding and status == "converged":
        res.embedding = reconstruct_embedding(st.transform_log, inst,
                                              grid=embedding_grid)
    return res


def _flow_time_one(F_series, S, pts, rtol=1e-12, atol=1e-14):
    """Time-1 flow of the generating field over stacked points."""
    ev = FieldEvaluator.build(F_series, S)
    shape = pts.shape

    def rhs(_t, flat):
        return ev(flat.reshape(shape)).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0), pts.ravel(), method="DOP853",
                    rtol=rtol, atol=atol, dense_output=False)
    if not sol.success:
        raise RuntimeError(f"generating flow failed: {sol.message}")
    return sol.y[:, -1].reshape(shape)


def reconstruct_embedding(transform_log, inst: ProblemInstance,
                          grid: int = 32) -> dict:
    """Pull the torus {y = 0, z = 0} back through all coordinate changes.

    Each step contributed w -> phi^1_F(w + y* shift); the original-space
    embedding applies the latest step first.  Returns a dict with the
    theta axis, the grid states (G, ..., G, l+n+2m) and the sup distance
    from the trivial embedding (0, theta, 0).
    """
    S = inst.structure
    l, n, m = S.l, S.n, S.m
    theta = 2.0 * np.pi * np.arange(grid) / grid
    mesh = np.meshgrid(*([theta] * n), indexing="ij")
    pts = np.zeros(mesh[0].shape + (l + n + 2 * m,))
    for a in range(n):
        pts[..., l + a] = mesh[a]
    flat = pts.reshape(-1, l + n + 2 * m)

    for g, y_star in reversed(transform_log):
        flat = flat.copy()
        flat[:, :l] += np.asarray(y_star, dtype=float)
        F = g.to_series(n, l, m, d_max=1, K_max=max(g.K_plus, 1))
        flat = _flow_time_one(F, S, flat)

    states = flat.reshape(pts.shape)
    dist = states.copy()
    for a in range(n):
        dist[..., l + a] -= mesh[a]
    return {
        "theta": theta,
        "states": states,
        "distance": float(np.abs(dist).max()),
    }


def _run_one(args):
    inst, params, want_embedding, embedding_grid = args
    res = run_point(inst, params, want_embedding, embedding_grid,
                    keep_state=False)
    return res


def run(instances, params: KamParams, jobs: int = 1,
        want_embedding: bool = False, embedding_grid: int = 32):
    """Run a family of instances, optionally in parallel."""
    work = [(inst, params, want_embedding, embedding_grid)
            for inst in instances]
    if jobs > 1 and len(work) > 1:
        with multiprocessing.Pool(jobs) as pool:
            return pool.map(_run_one, work)
    return [_run_one(w) for w in work]


# ----------------------------------------------------------------------
# measure of the sieved-out parameter set


@dataclass
class MeasureResult:
    gammas: np.ndarray
    fractions: np.ndarray
    slope: float
    tau: float
    K: int
    npoints: int
    dropped: list = field(default_factory=list)   # gammas with zero fraction

    def as_rows(self):
        return [{"gamma": float(g), "fraction": float(f)}
                for g, f in zip(self.gammas, self.fractions)]


def measure_excluded(omega_fn, lambda_box, gammas, tau: float, K: int,
                     grid_res: int, chunk: int = 8192) -> MeasureResult:
    """Fraction of a parameter box failing the Diophantine sieve.

    Brute force over a tensor grid of lambda values and all modes with
    0 < |k|_1 <= K: a point is excluded for a given gamma when
    min_k |<k, omega(lambda)>| |k|_1^tau <= gamma.  The per-point margin
    is computed once and reused across all gammas; the log-log slope of
    fraction against gamma estimates the measure exponent.
    """
    from .homological import _mode_list

    gammas = np.asarray(sorted(float(g) for g in gammas))
    axes = [np.linspace(lo, hi, grid_res) for lo, hi in lambda_box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=-1)
    npts = pts.shape[0]

    first = np.asarray(omega_fn(pts[0]), dtype=float)
    n = first.shape[0]
    ks = _mode_list(n, K).astype(float)
    wts = np.abs(ks).sum(axis=1) ** tau

    margins = np.empty(npts)
    for lo in range(0, npts, chunk):
        hi = min(lo + chunk, npts)
        om = np.array([omega_fn(p) for p in pts[lo:hi]], dtype=float)
        div = np.abs(om @ ks.T)
        margins[lo:hi] = (div * wts).min(axis=1)

    fractions = np.array([(margins <= g).mean() for g in gammas])
    keep = fractions > 0
    dropped = [float(g) for g in gammas[~keep]]
    if keep.sum() >= 2:
        slope = float(np.polyfit(np.log(gammas[keep]),
                                 np.log(fractions[keep]), 1)[0])
    else:
        slope = math.nan
    return MeasureResult(gammas, fractions, slope, tau, K, npts, dropped)
