"""Convolution kernel backend.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
numpy implementations in ``_reference`` are used.  Set ``CHEAPNET_KERNELS=numpy``
to force the fallback.
"""
import os

import numpy as np

from . import _reference

BACKEND = "numpy"
_impl = _reference

if os.environ.get("CHEAPNET_KERNELS", "").lower() != "numpy":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _reference


def _c(a):
    return np.ascontiguousarray(a)


def _cells(cells):
    return np.ascontiguousarray(cells, dtype=np.int_)


def im2col(xp, k, stride, out_h, out_w):
    return _impl.im2col(_c(xp), k, stride, out_h, out_w)


def col2im(cols, padded_shape, k, stride, out_h, out_w):
    return _impl.col2im(_c(cols), tuple(int(s) for s in padded_shape), k, stride, out_h, out_w)


def depthwise_forward(xp, w, stride, out_h, out_w):
    return _impl.depthwise_forward(_c(xp), _c(w), stride, out_h, out_w)


def depthwise_backward(xp, w, gout, stride):
    return _impl.depthwise_backward(_c(xp), _c(w), _c(gout), stride)


def shift_forward(xp, cells, k, stride, out_h, out_w):
    return _impl.shift_forward(_c(xp), _cells(cells), k, stride, out_h, out_w)


def shift_backward(gout, cells, k, stride, padded_shape):
    return _impl.shift_backward(_c(gout), _cells(cells), k, stride, tuple(int(s) for s in padded_shape))


def using(backend):
    """Return a namespace bound to one backend, for benchmarks and cross-checks."""
    if backend == "numpy":
        return _reference
    if backend == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")
