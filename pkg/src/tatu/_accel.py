"""Numba dispatch.

Kernels in :mod:`tatu.kernels` come in pairs: an explicit-loop version that
is compiled with ``numba.njit`` and a vectorized numpy version. The loop
version is used when numba imports cleanly and ``TATU_DISABLE_NUMBA`` is
unset; otherwise the numpy path runs. Both consume the same pre-drawn random
numbers, so they return identical results.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}

try:  # pragma: no cover - exercised implicitly by whichever branch applies
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def numba_disabled() -> bool:
    return os.environ.get("TATU_DISABLE_NUMBA", "0").strip().lower() not in _FALSY


USE_NUMBA = HAVE_NUMBA and not numba_disabled()


def njit(fn):
    """Compile ``fn`` with numba when available; return it unchanged otherwise.

    Compilation is lazy (first call), so importing the package stays cheap even
    with numba on.
    """
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
