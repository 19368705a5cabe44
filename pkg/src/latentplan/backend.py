"""Kernel backend selection.

The hot numeric kernels exist twice: a numba ``@njit`` version and a pure
numpy version. ``LATENTPLAN_BACKEND`` picks one at import time:

* ``auto`` (default) -- numba when importable, numpy otherwise
* ``numba``          -- require numba, fail loudly if missing
* ``numpy``          -- force the pure-numpy path (useful for debugging
                        and for the kernel benchmark)
"""

import os

ENV_VAR = "LATENTPLAN_BACKEND"


def _resolve() -> str:
    choice = os.environ.get(ENV_VAR, "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"{ENV_VAR} must be one of auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


BACKEND = _resolve()
HAS_NUMBA = BACKEND == "numba"
