"""Optional numba acceleration.

Set ``ROADLOC_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
is not importable the numpy kernels are used as well.
"""

import logging
import os

logger = logging.getLogger(__name__)

DISABLE_ENV = "ROADLOC_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False
    logger.warning("numba not importable, falling back to numpy kernels")


def _env_disabled() -> bool:
    return os.environ.get(DISABLE_ENV, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(pyfunc=None, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    Always compiles when numba is present, independent of ``USE_NUMBA``, so the
    benchmark and equivalence tests can reach both paths in one process.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        return numba.njit(pyfunc, **kwargs) if pyfunc is not None else numba.njit(**kwargs)

    def wrap(func):
        return func

    return wrap if pyfunc is None else wrap(pyfunc)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
