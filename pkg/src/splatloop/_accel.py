"""Numba dispatch.

Hot kernels are compiled with numba when it is importable. Setting
``SPLATLOOP_NO_NUMBA=1`` forces the pure-numpy fallbacks, which compute the
same quantities with vectorised array code.
"""
import os

try:
    import numba
    from numba import njit, prange

    NUMBA_AVAILABLE = True
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # an outdated TBB only produces a warning at first use; prefer OpenMP when present
        try:
            from numba.np.ufunc import omppool  # noqa: F401

            numba.config.THREADING_LAYER = "omp"
        except ImportError:
            pass
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator

    prange = range


def _env_disabled():
    return os.environ.get("SPLATLOOP_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
