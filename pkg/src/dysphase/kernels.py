"""Kernel backend selection.

The compiled Cython module is used when it was built and importable;
otherwise the numpy fallback in :mod:`dysphase._kernels_py` is used. Set
``DYSPHASE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("DYSPHASE_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _c4(x):
    return np.ascontiguousarray(x)


def im2col(x, kh, kw):
    return _impl.im2col(_c4(x), kh, kw)


def conv2d_direct(x, weight, bias):
    return _impl.conv2d_direct(_c4(x), _c4(weight), _c4(bias))


def conv2d_direct_weight_grad(x, grad, kh, kw):
    return _impl.conv2d_direct_weight_grad(_c4(x), _c4(grad), kh, kw)


def col2im(cols, c, h, w, kh, kw):
    return _impl.col2im(_c4(cols), c, h, w, kh, kw)


def maxpool2x2_forward(x):
    return _impl.maxpool2x2_forward(_c4(x))


def maxpool2x2_backward(grad, idx, h, w):
    return _impl.maxpool2x2_backward(_c4(grad), _c4(idx), h, w)


def sos_filter(x, sos):
    return _impl.sos_filter(x, sos)


def frame_mean(x, win, hop):
    return _impl.frame_mean(x, win, hop)


def relu_forward(x):
    return _impl.relu_forward(_c4(x))


def relu_backward(grad, out):
    return _impl.relu_backward(_c4(grad), _c4(out))


def channel_moments(x):
    return _impl.channel_moments(_c4(x))


def affine_normalize(x, mean, inv_std, scale, shift):
    return _impl.affine_normalize(_c4(x), mean, inv_std, scale, shift)


def batchnorm_backward(grad, xhat, scale, inv_std):
    return _impl.batchnorm_backward(_c4(grad), _c4(xhat), scale, inv_std)
