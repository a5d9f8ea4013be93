"""Backend selection for the hot block-recursion kernels.

Numba is used when importable unless ``SPINGP_DISABLE_NUMBA`` is set to a
truthy value, in which case the pure numpy/scipy kernels run instead.
"""
import os

_FALSE = {"", "0", "false", "no", "off"}

NUMBA_DISABLED = os.environ.get("SPINGP_DISABLE_NUMBA", "").strip().lower() not in _FALSE

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on environment
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not NUMBA_DISABLED


def available_backends():
    """Names of the kernel backends usable in this process."""
    return ("numba", "numpy") if NUMBA_AVAILABLE else ("numpy",)


def default_backend():
    return "numba" if USE_NUMBA else "numpy"
