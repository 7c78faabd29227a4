"""Numba dispatch.

Kernels are written once in the numba-compatible subset of Python and a
separate pure-numpy implementation is kept next to each. Setting
``VMFDINO_DISABLE_NUMBA=1`` selects the numpy path at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None

_DISABLED = os.environ.get("VMFDINO_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(f=None, **options):
    """``numba.njit`` with ``cache=True``, or the identity when numba is missing."""
    options.setdefault("cache", True)
    if numba is None:
        if f is None:
            return lambda g: g
        return f
    if f is None:
        return lambda g: numba.njit(g, **options)
    return numba.njit(f, **options)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
