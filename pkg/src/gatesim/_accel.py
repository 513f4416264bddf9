"""Kernel acceleration switch.

Hot numeric kernels across the package are decorated with :func:`njit`.
By default this is numba's ``njit`` (machine-code compiled, cached on
disk).  Setting the environment variable ``GATESIM_DISABLE_NUMBA=1``
before import replaces the decorator with a no-op so the identical
functions run as plain numpy/Python -- useful for debugging, coverage,
and the jit-vs-numpy benchmark under ``benchmarks/``.
"""

import os

_disabled = os.environ.get("GATESIM_DISABLE_NUMBA", "0") not in ("", "0")

NUMBA_ENABLED = False
if not _disabled:
    try:
        from numba import njit as _numba_njit

        NUMBA_ENABLED = True
    except ImportError:
        pass

if NUMBA_ENABLED:

    def njit(*args, **kwargs):
        kwargs.setdefault("cache", True)
        return _numba_njit(*args, **kwargs)

else:

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def decorate(func):
            return func

        return decorate
