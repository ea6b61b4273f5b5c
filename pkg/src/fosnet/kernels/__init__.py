"""Convolution hot loops: compiled extension when available, numpy otherwise.

Set ``FOSNET_BACKEND=python`` to force the numpy fallback.
"""
import os

from . import _pykernels

python_backend = _pykernels

try:
    if os.environ.get("FOSNET_BACKEND", "").lower() in ("python", "py", "numpy"):
        raise ImportError("compiled kernels disabled by FOSNET_BACKEND")
    from . import _ckernels as _active
    BACKEND = "cython"
except ImportError:
    _active = _pykernels
    BACKEND = "python"


def compiled_backend():
    """The compiled module, or None if the extension was not built."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def im2col(x, kh, kw, stride, pad):
    return _active.im2col(x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _active.col2im(cols, tuple(x_shape), kh, kw, stride, pad)


out_size = _pykernels.out_size
