"""Numba backend: JIT-compiled copies of the reference kernels.

A fresh copy of ``_kernels_impl`` is executed and its functions rebound to
their JIT dispatchers in dependency order, so intra-module calls resolve to
compiled code while the plain module used by the numpy backend stays
untouched. ``cache=True`` persists compilation across processes and
``nogil=True`` lets per-sample solves overlap under the thread pool.
"""

import importlib.util

from numba import njit

_spec = importlib.util.find_spec("diffanalog._kernels_impl")
_mod = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(_mod)

_jit = njit(cache=True, nogil=True)

for _name in _mod.KERNEL_NAMES:
    setattr(_mod, _name, _jit(getattr(_mod, _name)))

BACKEND_NAME = "numba"

tape_forward = _mod.tape_forward
tape_reverse = _mod.tape_reverse
solve_forward = _mod.solve_forward
solve_rows = _mod.solve_rows
backprop_sweep = _mod.backprop_sweep
aug_rhs = _mod.aug_rhs
adjoint_sweep = _mod.adjoint_sweep
