"""Numba switch.

Set ``CAMPUSFLOW_DISABLE_NUMBA=1`` to force the pure-numpy code paths (useful
for debugging and for the kernel benchmark).  When numba is not importable the
numpy paths are used automatically.
"""

import os

_DISABLED = os.environ.get("CAMPUSFLOW_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("disabled by CAMPUSFLOW_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"
