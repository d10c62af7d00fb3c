"""Kernel backend selection.

The hot element kernels run through numba's @njit by default. Setting the
environment variable STRIPEFORGE_BACKEND=numpy selects the plain
numpy/python implementation of the same functions (useful for debugging,
for platforms without numba, and for the benchmark comparing both paths).
"""

import os

_requested = os.environ.get("STRIPEFORGE_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(
        f"STRIPEFORGE_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

USE_NUMBA = _requested == "numba"
if USE_NUMBA:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

BACKEND = "numba" if USE_NUMBA else "numpy"


def jit(func):
    """Compile `func` with numba when enabled, otherwise return it unchanged."""
    if USE_NUMBA:
        return _njit(cache=True, fastmath=False)(func)
    return func
