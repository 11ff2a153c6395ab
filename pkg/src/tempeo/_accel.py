"""Numba availability and the env switch that forces the pure-numpy kernels.

Set ``TEMPEO_DISABLE_NUMBA=1`` before import to run every hot kernel through
its numpy fallback.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


HAVE_NUMBA = _have_numba()
NUMBA_DISABLED = _flag("TEMPEO_DISABLE_NUMBA")
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
