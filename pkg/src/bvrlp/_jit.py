"""numba switch.

Kernels are decorated with :func:`njit` from this module. When numba is
missing, or ``BVRLP_DISABLE_JIT`` is set to a truthy value, the decorator is
a no-op and the same functions run as plain numpy code.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

JIT_DISABLED = os.environ.get("BVRLP_DISABLE_JIT", "").strip().lower() not in _FALSY

try:
    import numba as _numba
except ImportError:  # pragma: no cover - exercised only without numba
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not JIT_DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise.

    Supports both ``@njit`` and ``@njit(cache=True, ...)``.
    """
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        if len(args) == 1 and callable(args[0]) and not kwargs.keys() - {"cache", "nogil"}:
            return _numba.njit(cache=kwargs["cache"], nogil=kwargs["nogil"])(args[0])
        return _numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]):
        return args[0]

    def wrapper(f):
        return f

    return wrapper


def py_func(f):
    """Return the undecorated Python function behind a kernel."""
    return getattr(f, "py_func", f)
