"""Selects the compiled kernels when built, the numpy fallback otherwise.

Set ``STEERCNN_KERNELS=python`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("STEERCNN_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # noqa: F811
    except ImportError:
        _impl = _fallback
    else:
        BACKEND = "cython"

im2col = _impl.im2col
col2im = _impl.col2im
max_pool2_forward = _impl.max_pool2_forward
max_pool2_backward = _impl.max_pool2_backward


def implementations():
    """Both kernel sets that are importable, keyed by backend name."""
    found = {"python": _fallback}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found
