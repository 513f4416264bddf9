"""gatesim: closed-loop vision-based drone racing simulator and library."""

__version__ = "0.1.0"

from ._accel import NUMBA_ENABLED

__all__ = ["NUMBA_ENABLED", "__version__"]
