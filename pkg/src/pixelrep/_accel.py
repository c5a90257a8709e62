"""Backend selection for the numeric kernels.

Set ``PIXELREP_NUMBA=0`` to force the pure-numpy path. The flag is read once
at import time.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("PIXELREP_NUMBA", "1"))
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(fn):
    """Compile ``fn`` with numba when it is importable, else return it untouched.

    Compilation is independent of ``USE_NUMBA`` so that both paths stay
    callable for benchmarking and parity tests.
    """
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
