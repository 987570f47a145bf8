"""Numba switch.

Hot kernels are written once and compiled with numba when it is importable.
Set ``REXMARKET_DISABLE_NUMBA=1`` to run the plain Python / numpy paths
instead (useful for debugging and for the kernel benchmark).
"""
import os

ENV_FLAG = "REXMARKET_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

DISABLED = os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = numba is not None and not DISABLED


def njit(fn):
    """Compile ``fn`` in nopython mode, or return it untouched when disabled."""
    if USE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


def py_func(fn):
    """The uncompiled Python function behind a (possibly) jitted kernel."""
    return getattr(fn, "py_func", fn)
