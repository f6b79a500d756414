"""Pure-Python/numpy backend: the reference kernels, uncompiled.

Semantically identical to the numba backend (same source), just slower.
Selected with ``DIFFANALOG_BACKEND=numpy``; useful where numba is
unavailable and as the ground truth the benchmark compares against.
"""

from ._kernels_impl import (  # noqa: F401
    adjoint_sweep,
    aug_rhs,
    backprop_sweep,
    solve_forward,
    solve_rows,
    tape_forward,
    tape_reverse,
)

BACKEND_NAME = "numpy"
