"""Backend selection for the degradation inner loops.

The compiled extension is used when it imports; set ``LIGHTBSR_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _purepy

try:
    if os.environ.get("LIGHTBSR_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _core as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _purepy
    BACKEND = "python"

valid_conv2d = _impl.valid_conv2d
resample_last = _impl.resample_last


def backends():
    """Available implementations, by name."""
    out = {"python": _purepy}
    try:
        from . import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out
