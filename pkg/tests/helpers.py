"""Shared builders for randomized test inputs.

Kept out of conftest so the acceptance module can import the same
generators and count its own cases.
"""

import numpy as np

from hypertori.series import Series


def random_modes(rng, n, K_max, count):
    """Distinct nonzero modes with |k|_1 <= K_max."""
    seen = set()
    tries = 0
    while len(seen) < count and tries < 50 * count:
        k = tuple(int(v) for v in rng.integers(-K_max, K_max + 1, size=n))
        tries += 1
        if sum(abs(v) for v in k) in range(1, K_max + 1):
            seen.add(k)
    return sorted(seen)


def random_exponent(rng, l, m, d_max):
    width = l + 2 * m
    e = [0] * width
    budget = int(rng.integers(0, d_max + 1))
    for _ in range(budget):
        e[int(rng.integers(0, width))] += 1
    return tuple(e)


def random_series(rng, n=2, l=1, m=1, d_max=2, K_max=2, terms=3,
                  real=True, scale=1.0) -> Series:
    """A small random series, hermitian-symmetric when real=True."""
    out = []
    for k in random_modes(rng, n, K_max, terms):
        e = random_exponent(rng, l, m, d_max)
        i, j = e[:l], e[l:]
        v = scale * complex(rng.uniform(-1, 1), rng.uniform(-1, 1))
        out.append((k, i, j, v))
        if real:
            out.append((tuple(-q for q in k), i, j, np.conj(v)))
    # a couple of k = 0 terms so averages are exercised too
    for _ in range(2):
        e = random_exponent(rng, l, m, d_max)
        out.append(((0,) * n, e[:l], e[l:], scale * rng.uniform(-1, 1)))
    return Series.from_terms(n, l, m, d_max, K_max, out)


def series_close(a: Series, b: Series, tol: float) -> float:
    """Max absolute coefficient difference; also returns it for messages."""
    worst = 0.0
    keys = set(a.coeffs) | set(b.coeffs)
    for e in keys:
        ga = a.coeffs.get(e)
        gb = b.coeffs.get(e)
        if ga is None:
            worst = max(worst, float(np.abs(gb).max()))
            continue
        if gb is None:
            worst = max(worst, float(np.abs(ga).max()))
            continue
        K = max(a.K_max, b.K_max)
        from hypertori.series import _embed
        worst = max(worst, float(np.abs(_embed(ga, a.K_max, K)
                                        - _embed(gb, b.K_max, K)).max()))
    assert worst <= tol, f"series differ by {worst:.3e} > {tol:.1e}"
    return worst
