"""JIT switch.

Set ``PROPULSION_LAB_JIT=0`` before import to run every kernel through its
pure-numpy path (useful for debugging or when numba is unavailable).
"""

import os

_flag = os.environ.get("PROPULSION_LAB_JIT", "1").strip().lower()
JIT_REQUESTED = _flag not in ("0", "false", "no", "off")

try:
    from numba import njit as _numba_njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_njit = None
    NUMBA_AVAILABLE = False

JIT_ENABLED = JIT_REQUESTED and NUMBA_AVAILABLE


def njit(func=None, **kwargs):
    """``numba.njit`` that degrades to the identity when numba is missing."""
    kwargs.setdefault("cache", True)
    if _numba_njit is None:
        if func is not None:
            return func
        return lambda f: f
    if func is not None:
        return _numba_njit(**kwargs)(func)
    return _numba_njit(**kwargs)
