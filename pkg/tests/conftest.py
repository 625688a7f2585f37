"""Shared fixtures: converged runs are expensive, so build them once.

The 128-point embedding reconstruction dominates the suite's runtime
(about two minutes); every test that needs a converged torus shares the
same session-scoped result instead of re-iterating.
"""

import pytest

from hypertori.driver import run_point
from hypertori.kamstep import KamParams
from hypertori.presets import example1, example2


@pytest.fixture(scope="session")
def preset1_run():
    """Converged run at eps = 1e-4 with the full-resolution embedding."""
    return run_point(example1(eps=1e-4), KamParams(gamma0=0.05),
                     want_embedding=True, embedding_grid=128)


@pytest.fixture(scope="session")
def preset2_run():
    return run_point(example2(eps=1e-4), KamParams(gamma0=0.05))
