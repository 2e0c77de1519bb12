"""Backend selection for the hot per-point kernels.

Set ``DVGP_NUMBA=0`` before import to force the pure-numpy path. The numba
path is also skipped silently when numba cannot be imported.
"""
import os

_FALSEY = {"0", "false", "no", "off"}

USE_NUMBA = os.environ.get("DVGP_NUMBA", "1").strip().lower() not in _FALSEY

if USE_NUMBA:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover - depends on environment
        USE_NUMBA = False


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def max_threads(default=None):
    """Worker thread cap from ``DVGP_THREADS`` (``None`` means no cap)."""
    raw = os.environ.get("DVGP_THREADS")
    if raw is None or raw.strip() == "":
        return default
    value = int(raw)
    if value < 1:
        raise ValueError("DVGP_THREADS must be a positive integer")
    return value
