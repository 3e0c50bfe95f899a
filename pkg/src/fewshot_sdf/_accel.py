"""Numba switch shared by the hot kernels.

Set ``FEWSHOT_SDF_DISABLE_NUMBA=1`` to force the pure-numpy paths (useful for
debugging and for checking that both paths agree). ``FEWSHOT_SDF_THREADS``
caps the numba thread pool.
"""

import os

_DISABLED = os.environ.get("FEWSHOT_SDF_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by FEWSHOT_SDF_DISABLE_NUMBA")
    import numba

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the always-available layer; avoids probing an outdated TBB
        numba.config.THREADING_LAYER = "workqueue"
    njit = numba.njit
    prange = numba.prange
    HAVE_NUMBA = True
    _threads = os.environ.get("FEWSHOT_SDF_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap

    prange = range


def use_numba() -> bool:
    return HAVE_NUMBA


def set_threads(n: int) -> None:
    """Numba thread count; a no-op on the numpy path."""
    if HAVE_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
