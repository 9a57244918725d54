"""Numba availability switch.

Kernels are written once and decorated with :func:`njit`. When numba is
missing, or ``QPBURST_DISABLE_NUMBA`` is set to a truthy value, callers use
the numpy implementations instead (see ``USE_NUMBA``).
"""
import os

_FLAG = os.environ.get("QPBURST_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(*args, **kwargs):
    """``numba.njit(nogil=True, cache=True)`` or an identity decorator."""
    if numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("nogil", True)
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
