"""Numba dispatch.

Hot kernels are written twice: a numba ``@njit`` loop and a vectorized numpy
version.  The numba path is used when numba imports and the environment
variable ``V2IFUSE_DISABLE_NUMBA`` is unset (or ``0``).
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("V2IFUSE_DISABLE_NUMBA", "0").strip().lower()
    return HAVE_NUMBA and flag in ("", "0", "false", "no")


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``, or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
