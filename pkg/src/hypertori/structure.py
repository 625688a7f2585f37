"""Generalized Poisson structure on T^n x R^l x R^2m.

The phase space carries the (possibly degenerate) structure matrix

    Itilde = blockdiag(I, J),   I = [[0, E], [-E^T, C]],

acting on states ordered (y, x, z): E is an l x n coupling matrix, C an
antisymmetric n x n matrix, and J the standard symplectic matrix on the
normal variables z = (u_1..u_m, v_1..v_m).  The induced bracket is

    {f, g} = <f_y, E g_x> + <f_x, -E^T g_y + C g_x> + <f_z, J g_z>

and the equations of motion are ydot = E H_x, xdot = -E^T H_y + C H_x,
zdot = J H_z.  The toral frequency of a normal form e + <Omega, y> + ...
is omega = -E^T Omega.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import series
from .series import Series, TailMeter


@dataclass(frozen=True)
class PoissonStructure:
    n: int
    l: int
    m: int
    E: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        C = np.asarray(self.C, dtype=float)
        if E.shape != (self.l, self.n):
            raise ValueError(f"E must be {self.l}x{self.n}, got {E.shape}")
        if C.shape != (self.n, self.n):
            raise ValueError(f"C must be {self.n}x{self.n}, got {C.shape}")
        if not np.array_equal(C, -C.T):
            raise ValueError("C must be antisymmetric")
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "C", C)

    @property
    def J(self) -> np.ndarray:
        m = self.m
        J = np.zeros((2 * m, 2 * m))
        J[:m, m:] = np.eye(m)
        J[m:, :m] = -np.eye(m)
        return J

    @property
    def Itilde(self) -> np.ndarray:
        """Full structure matrix in (y, x, z) ordering."""
        l, n, m = self.l, self.n, self.m
        d = l + n + 2 * m
        It = np.zeros((d, d))
        It[:l, l:l + n] = self.E
        It[l:l + n, :l] = -self.E.T
        It[l:l + n, l:l + n] = self.C
        It[l + n:, l + n:] = self.J
        return It

    def toral_frequency(self, Omega) -> np.ndarray:
        return -self.E.T @ np.asarray(Omega, dtype=float)


def _apply_J(series_list, m):
    """J acting on a list of 2m series: (a, b) -> (b, -a) blockwise."""
    top = series_list[m:]
    bot = [series.scale(p, -1.0) for p in series_list[:m]]
    return top + bot


def bracket(f: Series, g: Series, S: PoissonStructure,
            d_cap: int, K_cap: int, meter: TailMeter | None = None) -> Series:
    """Poisson bracket {f, g} truncated at the given caps.

    Products are accumulated only over the nonzero entries of E, C and J,
    so sparse structure matrices (the usual case) stay cheap.  Truncation
    tails of the underlying products accumulate on the meter.
    """
    if not f.dims_match(g):
        raise ValueError("bracket operands live on different phase spaces")
    n, l, m = S.n, S.l, S.m
    if (f.n, f.l, f.m) != (n, l, m):
        raise ValueError("series dimensions do not match the structure")

    fx = [series.differentiate(f, "x", a) for a in range(n)]
    gx = [series.differentiate(g, "x", a) for a in range(n)]
    out = Series.zero(n, l, m, d_cap, K_cap)

    if np.any(S.E):
        fy = [series.differentiate(f, "y", b) for b in range(l)]
        gy = [series.differentiate(g, "y", b) for b in range(l)]
        for i, a in np.argwhere(S.E != 0.0):
            c = S.E[i, a]
            if not fy[i].is_zero() and not gx[a].is_zero():
                t = series.multiply(fy[i], gx[a], d_cap, K_cap, meter)
                out = series.add(out, series.scale(t, c))
            if not fx[a].is_zero() and not gy[i].is_zero():
                t = series.multiply(fx[a], gy[i], d_cap, K_cap, meter)
                out = series.add(out, series.scale(t, -c))

    for a, b in np.argwhere(S.C != 0.0):
        if not fx[a].is_zero() and not gx[b].is_zero():
            t = series.multiply(fx[a], gx[b], d_cap, K_cap, meter)
            out = series.add(out, series.scale(t, S.C[a, b]))

    if m:
        fz = [series.differentiate(f, "z", c) for c in range(2 * m)]
        gz = [series.differentiate(g, "z", c) for c in range(2 * m)]
        for c in range(m):
            # <f_z, J g_z> = sum_c f_u[c] g_v[c] - f_v[c] g_u[c]
            if not fz[c].is_zero() and not gz[m + c].is_zero():
                t = series.multiply(fz[c], gz[m + c], d_cap, K_cap, meter)
                out = series.add(out, t)
            if not fz[m + c].is_zero() and not gz[c].is_zero():
                t = series.multiply(fz[m + c], gz[c], d_cap, K_cap, meter)
                out = series.add(out, series.scale(t, -1.0))
    return out


def vector_field(H: Series, S: PoissonStructure, d_cap: int, K_cap: int):
    """Hamiltonian vector field as component series.

    Returns (ydot, xdot, zdot): lists of l, n and 2m series with

        ydot = E H_x,   xdot = -E^T H_y + C H_x,   zdot = J H_z.

    Only linear combinations of partials, no products, so the caps only
    re-house the results.
    """
    n, l, m = S.n, S.l, S.m
    Hx = [series.differentiate(H, "x", a) for a in range(n)]
    Hy = [series.differentiate(H, "y", b) for b in range(l)]
    Hz = [series.differentiate(H, "z", c) for c in range(2 * m)]

    def combo(cols, weights):
        acc = Series.zero(n, l, m, d_cap, K_cap)
        for p, w in zip(cols, weights):
            if w != 0.0 and not p.is_zero():
                acc = series.add(acc, series.scale(p, w))
        return acc

    ydot = [combo(Hx, S.E[i, :]) for i in range(l)]
    xdot = [combo(Hy + Hx, np.concatenate([-S.E[:, a], S.C[a, :]]))
            for a in range(n)]
    zdot = _apply_J(Hz, m)
    return ydot, xdot, zdot


@dataclass
class FieldEvaluator:
    """Fast pointwise evaluator for a fixed Hamiltonian vector field.

    Collects the union of Fourier modes over all component series once,
    so each evaluation costs a single complex exponential per mode.
    """

    S: PoissonStructure
    components: list = field(default_factory=list)   # list of Series, state-ordered (y, x, z)
    _modes: np.ndarray = None
    _slots: list = None

    @classmethod
    def build(cls, H: Series, S: PoissonStructure, d_cap=None, K_cap=None):
        d_cap = H.d_max if d_cap is None else d_cap
        K_cap = H.K_max if K_cap is None else K_cap
        ydot, xdot, zdot = vector_field(H, S, d_cap, K_cap)
        ev = cls(S=S, components=ydot + xdot + zdot)
        ev._index()
        return ev

    def _index(self):
        mode_set = {}
        slots = []
        for comp in self.components:
            per_comp = []
            K = comp.K_max
            for e, g in comp.coeffs.items():
                idx = np.argwhere(g != 0.0)
                ks = idx - K
                cs = g[tuple(idx.T)]
                positions = np.array([mode_set.setdefault(tuple(k), len(mode_set))
                                      for k in ks], dtype=int)
                per_comp.append((e, positions, cs))
            slots.append(per_comp)
        self._modes = np.array(sorted(mode_set, key=mode_set.get), dtype=float) \
            if mode_set else np.zeros((0, self.S.n))
        self._slots = slots

    def __call__(self, state: np.ndarray) -> np.ndarray:
        """Vector field at stacked states, shape (N, l+n+2m) -> same shape."""
        state = np.atleast_2d(state)
        N = state.shape[0]
        l, n, m = self.S.l, self.S.n, self.S.m
        y = state[:, :l]
        x = state[:, l:l + n]
        z = state[:, l + n:]
        phase = np.exp(1j * (x @ self._modes.T)) if len(self._modes) else \
            np.zeros((N, 0), dtype=complex)
        out = np.zeros((N, l + n + 2 * m))
        for ci, per_comp in enumerate(self._slots):
            acc = np.zeros(N, dtype=complex)
            for e, positions, cs in per_comp:
                mono = np.ones(N)
                for b in range(l):
                    if e[b]:
                        mono = mono * y[:, b] ** e[b]
                for c in range(2 * m):
                    if e[l + c]:
                        mono = mono * z[:, c] ** e[l + c]
                acc += (phase[:, positions] @ cs) * mono
            out[:, ci] = acc.real
        return out
