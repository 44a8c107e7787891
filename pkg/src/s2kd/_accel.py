"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``S2KD_DISABLE_NUMBA=1`` is set (or numba is missing),
in which case each kernel module falls back to its vectorised numpy path.
"""
import os

_disabled = os.environ.get("S2KD_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError
    from numba import njit, prange  # noqa: F401

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap

    prange = range

USE_NUMBA = HAVE_NUMBA


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
