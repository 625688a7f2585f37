"""Two ready-made model systems used throughout the tests and scripts.

Preset 1 (odd-dimensional, frequency fully preserved):
    N = y + y^2/2 + (u^2 - v^2)/2 on T^2 x R x R^2, structure

        I = [[0, a, b], [-a, 0, -c], [-b, c, 0]]

    over (y, x1, x2), so E = (a, b) and the toral frequency is
    omega = (-a, -b).  The averaged action block [A] = (1) is
    nonsingular with n0 = l = 1, hence Omega stays pinned exactly; the
    twist-rank condition fails on purpose (omega(y) is a scalar multiple
    of a fixed vector).

Preset 2 (three actions, two hyperbolic planes, partial preservation):
    N = y1^2/2 + y2^2/2 + (u1^2 - v1^2)/2 + (u2^2 - 2 v2^2)/2 expanded
    around y = (lam1, lam2, 0) on the sub-manifold y3 = 0, with

        E = [[-1, 0], [0, -1], [0, 0]],   C = [[0, 1], [-1, 0]].

    Here Omega(lam) = (lam1, lam2, 0), omega = (lam1, lam2), [A] =
    diag(1, 1, 0) is singular with working minor n0 = 2: the first two
    frequency components are preserved, the third is free to drift at
    the size of the perturbation.
"""

from __future__ import annotations

import math

import numpy as np

from .model import NormalForm, ProblemInstance, SeriesMatrix
from .series import Series
from .structure import PoissonStructure

GOLDEN = (1.0 + math.sqrt(5.0)) / 2.0


def _cos_terms(k, i, j, amp):
    """amp * cos(<k, x>) * y^i z^j as a pair of conjugate terms."""
    mk = tuple(-q for q in k)
    return [(k, i, j, 0.5 * amp), (mk, i, j, 0.5 * amp)]


def example1(eps: float = 1e-4, alpha: float = 1.0, beta: float = GOLDEN,
             gamma_struct: float = 0.0, lam: float = 0.0, d_max: int = 4,
             perturbation: Series | None = None) -> ProblemInstance:
    """Preset 1 instance; the default perturbation is

        P = eps (cos x1 + cos x2 + u cos x1).

    lam is the action offset of the target torus: the normal form is
    re-expanded around y = lam, so Omega = 1 + lam and the frequency is
    (1 + lam) (-alpha, -beta).
    """
    n, l, m = 2, 1, 1
    S = PoissonStructure(
        n=n, l=l, m=m,
        E=np.array([[alpha, beta]]),
        C=np.array([[0.0, -gamma_struct], [gamma_struct, 0.0]]),
    )
    N = NormalForm(
        e=lam + 0.5 * lam ** 2,
        Omega=np.array([1.0 + lam]),
        A=SeriesMatrix.constant([[1.0]], n),
        B=SeriesMatrix.constant(np.zeros((1, 2)), n),
        M=SeriesMatrix.constant(np.diag([1.0, -1.0]), n),
        h=Series.zero(n, l, m, d_max, 0),
    )
    if perturbation is None:
        terms = []
        terms += _cos_terms((1, 0), (0,), (0, 0), eps)
        terms += _cos_terms((0, 1), (0,), (0, 0), eps)
        terms += _cos_terms((1, 0), (0,), (1, 0), eps)
        perturbation = Series.from_terms(n, l, m, d_max, 1, terms)
    return ProblemInstance(structure=S, normal_form=N, P=perturbation,
                           n0=1, lam=np.array([float(lam)]), name="preset1")


def example1_omega_fn(alpha: float = 1.0, beta: float = GOLDEN):
    """Frequency map over the action offset, for the twist-rank check.

    omega(y) = (-alpha (1 + y), -beta (1 + y)): rank 1 for every y, so
    the twist-rank check is expected to fail on this family.
    """
    def fn(lam):
        y = float(np.atleast_1d(lam)[0])
        return np.array([-alpha * (1.0 + y), -beta * (1.0 + y)])
    return fn


def example2(lam=(1.0, GOLDEN), eps: float = 1e-4, d_max: int = 4,
             perturbation: Series | None = None) -> ProblemInstance:
    """Preset 2 instance at action point (lam1, lam2, 0).

    The default perturbation exercises every family the solver handles:

        P = eps (cos x1 + cos x2 + y1 + y3 + u1 + u2 cos x2 + y1 cos x2).

    The k = 0 action-linear terms force a genuine translation y* and an
    O(eps) drift of the unprotected third frequency component.
    """
    n, l, m = 2, 3, 2
    lam = np.asarray(lam, dtype=float)
    S = PoissonStructure(
        n=n, l=l, m=m,
        E=np.array([[-1.0, 0.0], [0.0, -1.0], [0.0, 0.0]]),
        C=np.array([[0.0, 1.0], [-1.0, 0.0]]),
    )
    N = NormalForm(
        e=0.5 * float(lam @ lam),
        Omega=np.array([lam[0], lam[1], 0.0]),
        A=SeriesMatrix.constant(np.diag([1.0, 1.0, 0.0]), n),
        B=SeriesMatrix.constant(np.zeros((3, 4)), n),
        M=SeriesMatrix.constant(np.diag([1.0, 1.0, -1.0, -2.0]), n),
        h=Series.zero(n, l, m, d_max, 0),
    )
    if perturbation is None:
        terms = []
        terms += _cos_terms((1, 0), (0, 0, 0), (0, 0, 0, 0), eps)
        terms += _cos_terms((0, 1), (0, 0, 0), (0, 0, 0, 0), eps)
        terms += [((0, 0), (1, 0, 0), (0, 0, 0, 0), eps)]
        terms += [((0, 0), (0, 0, 1), (0, 0, 0, 0), eps)]
        terms += [((0, 0), (0, 0, 0), (1, 0, 0, 0), eps)]
        terms += _cos_terms((0, 1), (0, 0, 0), (0, 1, 0, 0), eps)
        terms += _cos_terms((0, 1), (1, 0, 0), (0, 0, 0, 0), eps)
        perturbation = Series.from_terms(n, l, m, d_max, 1, terms)
    return ProblemInstance(structure=S, normal_form=N, P=perturbation,
                           n0=2, lam=lam, name="preset2")


def example2_omega_fn():
    """omega(lam) = (lam1, lam2): full twist rank everywhere."""
    def fn(lam):
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        return np.array([lam[0], lam[1]])
    return fn


def get(name: str, **kwargs) -> ProblemInstance:
    table = {"example1": example1, "example2": example2,
             "preset1": example1, "preset2": example2}
    if name not in table:
        raise KeyError(f"unknown preset {name!r}; have {sorted(set(table))}")
    return table[name](**kwargs)
