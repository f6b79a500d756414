"""Kernel backend selection.

The hot numeric kernels exist twice: JIT-compiled via numba and as plain
Python. The environment variable ``DIFFANALOG_BACKEND`` picks one:

    DIFFANALOG_BACKEND=numba   force the JIT backend (default when importable)
    DIFFANALOG_BACKEND=numpy   force the pure-Python fallback

``set_backend`` switches programmatically (used by the benchmark).
"""

import os

from .errors import ConfigError

_selected = None


def _load(name: str):
    if name == "numba":
        from . import _kernels_numba as mod
    elif name == "numpy":
        from . import _kernels_numpy as mod
    else:
        raise ConfigError(f"unknown backend {name!r} (expected 'numba' or 'numpy')")
    return mod


def kernels():
    """The active kernel module, resolving the env flag on first use."""
    global _selected
    if _selected is None:
        name = os.environ.get("DIFFANALOG_BACKEND", "").strip().lower()
        if name in ("", "auto"):
            try:
                _selected = _load("numba")
            except ImportError:
                _selected = _load("numpy")
        else:
            _selected = _load(name)
    return _selected


def set_backend(name: str):
    """Explicitly select a backend; returns the kernel module."""
    global _selected
    _selected = _load(name)
    return _selected


def backend_name() -> str:
    return kernels().BACKEND_NAME
