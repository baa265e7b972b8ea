"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
fallback is. Set ``ECHOSCAPE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ECHOSCAPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def bilinear_sample(img, rows, cols, fill=0.0):
    """Sample ``img`` at fractional (row, col) index pairs.

    Coordinates outside ``[0, H-1] x [0, W-1]`` receive ``fill``.
    """
    return _impl.bilinear_sample(
        np.ascontiguousarray(img, dtype=np.float64),
        np.ascontiguousarray(rows, dtype=np.float64),
        np.ascontiguousarray(cols, dtype=np.float64),
        float(fill),
    )


def im2col(x, kh, kw, stride, pads):
    pt, pb, pl, pr = pads
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, pt, pb, pl, pr)


def col2im(cols, shape, kh, kw, stride, pads):
    """Scatter-add columns back onto an image of ``shape = (C, H, W)``."""
    C, H, W = shape
    pt, pb, pl, pr = pads
    return _impl.col2im(np.ascontiguousarray(cols), C, H, W, kh, kw, stride, pt, pb, pl, pr)
