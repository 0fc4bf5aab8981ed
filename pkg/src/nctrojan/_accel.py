"""JIT switch for the hot kernels.

Set ``NCTJ_DISABLE_NUMBA=1`` to route every kernel through its pure-numpy
path. The flag is read once, at import time.
"""

import os

_FLAG = os.getenv("NCTJ_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED

NUMBA_OPTS = {
    "cache": True,
    "nogil": True,
}


def njit(func):
    """Compile ``func`` in nopython mode, or return None without numba.

    Compilation happens even when the env flag is set so that the benchmark
    can compare both paths inside one process.
    """
    if not HAVE_NUMBA:
        return None
    return numba.njit(**NUMBA_OPTS)(func)


def pick(numba_impl, numpy_impl):
    return numba_impl if (USE_NUMBA and numba_impl is not None) else numpy_impl


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
