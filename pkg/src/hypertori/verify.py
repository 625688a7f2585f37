"""Independent checks on computed tori: flows, invariance, rotation.

Everything here deliberately avoids the series algebra of the iteration
itself: trajectories come from a hand-rolled classical Runge-Kutta
integrator (whose fourth-order energy drift is itself a test target),
invariance residuals from spectral differentiation of the embedding on
a grid, rotation numbers from a least-squares slope of the unwrapped
angles.  Agreement with the iteration's own bookkeeping is evidence,
not circularity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .series import Series
from .structure import FieldEvaluator, PoissonStructure


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray        # (N, l + n + 2m), angles unwrapped in R^n
    energy: np.ndarray
    dims: tuple               # (l, n, m)
    escaped: bool = False
    escape_time: float = math.inf

    @property
    def x(self) -> np.ndarray:
        l, n, _ = self.dims
        return self.states[:, l:l + n]

    def energy_drift(self) -> float:
        return float(np.abs(self.energy - self.energy[0]).max())


def _rk4(field_fn, state0, T, dt, guard):
    state0 = np.asarray(state0, dtype=float)
    nsteps = int(round(T / dt))
    times = np.arange(nsteps + 1) * dt
    out = np.empty((nsteps + 1,) + state0.shape)
    out[0] = state0
    s = state0.copy()
    escaped, t_esc = False, math.inf
    for i in range(nsteps):
        k1 = field_fn(s)
        k2 = field_fn(s + 0.5 * dt * k1)
        k3 = field_fn(s + 0.5 * dt * k2)
        k4 = field_fn(s + dt * k3)
        s = s + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = s
        if not escaped and np.abs(s).max() > guard:
            escaped, t_esc = True, times[i + 1]
            out = out[:i + 2]
            times = times[:i + 2]
            break
    return times, out, escaped, t_esc


def integrate(H: Series, S: PoissonStructure, state0, T: float, dt: float,
              guard: float = 1e3) -> Trajectory:
    """Classical RK4 orbit of the full vector field, fixed step.

    state0 is ordered (y, x, z).  Hyperbolic orbits off the torus blow
    up like e^{sigma t}; the guard radius stops the run and flags it
    rather than overflowing.
    """
    ev = FieldEvaluator.build(H, S)

    def f(s):
        return ev(s[None, :])[0]

    times, states, escaped, t_esc = _rk4(f, state0, T, dt, guard)
    energy = H.evaluate(states[:, S.l:S.l + S.n],
                        states[:, :S.l], states[:, S.l + S.n:]).real
    return Trajectory(times, states, energy, (S.l, S.n, S.m), escaped, t_esc)


def torus_flow(H: Series, S: PoissonStructure, theta0, T: float,
               dt: float) -> Trajectory:
    """Flow restricted to the torus y = 0, z = 0.

    Integrates theta' = (angle block of X_H)(0, theta, 0).  For a
    Hamiltonian in final normal form the torus is invariant up to the
    tail of the iteration, so this sidesteps the normal hyperbolic
    escape entirely and long integration windows become available for
    rotation-number extraction.
    """
    ev = FieldEvaluator.build(H, S)
    l, n, m = S.l, S.n, S.m
    theta0 = np.asarray(theta0, dtype=float)

    def f(theta):
        full = np.zeros((1, l + n + 2 * m))
        full[0, l:l + n] = theta
        return ev(full)[0, l:l + n]

    times, thetas, escaped, t_esc = _rk4(f, theta0, T, dt, guard=1e9)
    states = np.zeros((thetas.shape[0], l + n + 2 * m))
    states[:, l:l + n] = thetas
    energy = H.evaluate(thetas, np.zeros((thetas.shape[0], l)),
                        np.zeros((thetas.shape[0], 2 * m))).real
    return Trajectory(times, states, energy, (l, n, m), escaped, t_esc)


def rotation_numbers(traj: Trajectory) -> np.ndarray:
    """Least-squares slope of each unwrapped angle against time."""
    t = traj.times
    if t.shape[0] < 8:
        raise ValueError("trajectory too short to fit rotation numbers")
    X = traj.x
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, X, rcond=None)
    return coef[0]


def _spectral_derivative(field_grid: np.ndarray, axis: int) -> np.ndarray:
    G = field_grid.shape[axis]
    k = np.fft.fftfreq(G, d=1.0 / G)
    shape = [1] * field_grid.ndim
    shape[axis] = G
    hat = np.fft.fft(field_grid, axis=axis)
    return np.fft.ifft(1j * k.reshape(shape) * hat, axis=axis)


def _aliasing_fraction(field_grid: np.ndarray, axis: int) -> float:
    """Relative spectral energy in the top quarter of the band."""
    G = field_grid.shape[axis]
    k = np.abs(np.fft.fftfreq(G, d=1.0 / G))
    hat = np.abs(np.fft.fft(field_grid, axis=axis)) ** 2
    total = hat.sum()
    if total == 0:
        return 0.0
    shape = [1] * field_grid.ndim
    shape[axis] = G
    top = np.broadcast_to((k >= G / 4.0).reshape(shape), hat.shape)
    return float(hat[top].sum() / total)


def invariance_residual(embedding: dict, omega, H: Series,
                        S: PoissonStructure, aliasing_tol: float = 1e-8):
    """max over the grid of | DPsi(theta) omega - X_H(Psi(theta)) |.

    embedding holds "states": an array of shape (G, ..., G, l+n+2m)
    sampled on the uniform theta grid (2 pi j / G per axis).  The angle
    components of the embedding are theta plus a periodic part; the
    identity's derivative is added back after spectral differentiation
    of that periodic part.  If any component carries more than
    aliasing_tol of its spectral energy in the top quarter of the band,
    the grid cannot support the derivative and a ValueError is raised.

    Returns (residual, field) with field the pointwise Euclidean norm.
    """
    omega = np.asarray(omega, dtype=float)
    states = np.asarray(embedding["states"], dtype=float)
    l, n, m = S.l, S.n, S.m
    dim = l + n + 2 * m
    if states.shape[-1] != dim or states.ndim != n + 1:
        raise ValueError("embedding states have the wrong shape")
    G = states.shape[0]
    axes_sizes = states.shape[:-1]
    if any(g != G for g in axes_sizes):
        raise ValueError("embedding grid must be uniform per axis")

    theta_1d = 2.0 * np.pi * np.arange(G) / G
    mesh = np.meshgrid(*([theta_1d] * n), indexing="ij")

    periodic = states.copy()
    for a in range(n):
        periodic[..., l + a] -= mesh[a]

    for c in range(dim):
        for a in range(n):
            frac = _aliasing_fraction(periodic[..., c], axis=a)
            if frac > aliasing_tol:
                raise ValueError(
                    f"grid too coarse: component {c} carries {frac:.2e} "
                    f"of its energy in the top quarter band along axis {a}")

    transport = np.zeros_like(states)
    for a in range(n):
        if omega[a] == 0.0:
            continue
        d = np.stack([_spectral_derivative(periodic[..., c], axis=a).real
                      for c in range(dim)], axis=-1)
        transport += omega[a] * d
    for a in range(n):
        transport[..., l + a] += omega[a]

    ev = FieldEvaluator.build(H, S)
    flat = states.reshape(-1, dim)
    Xh = ev(flat).reshape(states.shape)
    diff = transport - Xh
    fieldnorm = np.sqrt((diff ** 2).sum(axis=-1))
    return float(fieldnorm.max()), fieldnorm
