"""Kernel dispatch.

The compiled extension is used when it imports; otherwise (or when
``ATLASFUSE_PURE_PYTHON=1``) the NumPy twins are used. ``BACKEND`` names the
active implementation.
"""
import os

from . import _pykernels as python

compiled = None
if os.environ.get("ATLASFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

sample_points = _impl.sample_points
warp_sample = _impl.warp_sample
warp_backprop = _impl.warp_backprop
mse_backprop = _impl.mse_backprop
edt_sq_lines = _impl.edt_sq_lines
label_components = _impl.label_components
thin3d = _impl.thin3d

__all__ = [
    "BACKEND", "compiled", "python", "sample_points", "warp_sample", "warp_backprop", "mse_backprop",
    "edt_sq_lines", "label_components", "thin3d",
]
