"""KAM iteration for hyperbolic invariant tori of generalized Hamiltonian systems."""

from .series import Series, TailMeter, add, average, differentiate, multiply, \
    scale, subtract, sup_norm, taylor_shift_y, truncate_R
from .structure import PoissonStructure, bracket, vector_field
from .model import NormalForm, ProblemInstance, SeriesMatrix

__all__ = [
    "Series", "TailMeter", "add", "average", "differentiate", "multiply",
    "scale", "subtract", "sup_norm", "taylor_shift_y", "truncate_R",
    "PoissonStructure", "bracket", "vector_field",
    "NormalForm", "ProblemInstance", "SeriesMatrix",
]
