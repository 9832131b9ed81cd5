"""Optional numba acceleration.

Kernels are written once as plain Python over numpy arrays. When numba is
importable and ``FRL_NUMBA`` is not set to ``0``, they are compiled with
``numba.njit``; otherwise the same source runs as ordinary Python and the
callers switch to their vectorized numpy paths.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled():
    value = os.environ.get("FRL_NUMBA", "1").strip().lower()
    return value not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


def jit(func):
    """Compile ``func`` with numba when acceleration is enabled."""
    if USE_NUMBA:
        return numba.njit(cache=True)(func)
    return func
