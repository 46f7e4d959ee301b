"""Dense and block-sparse linear algebra kernels."""

from .dense import eigh, solve_complex
from .ldl import (
    LDLFactor,
    SelectedInverse,
    flops_and_peak,
    ldl_factor,
    selected_inverse,
    symbolic_factor,
)
from .pattern import (
    BlockSparseMat,
    BlockSparsePattern,
    Ordering,
    dense_pattern,
    grid_pattern,
    order,
    path_pattern,
)

__all__ = [
    "eigh",
    "solve_complex",
    "BlockSparseMat",
    "BlockSparsePattern",
    "Ordering",
    "order",
    "path_pattern",
    "grid_pattern",
    "dense_pattern",
    "LDLFactor",
    "SelectedInverse",
    "symbolic_factor",
    "ldl_factor",
    "selected_inverse",
    "flops_and_peak",
]
