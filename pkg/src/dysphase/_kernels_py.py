"""Pure numpy implementations of the hot kernels.

Each function mirrors the signature of its counterpart in ``_kernels.pyx``
and produces bit-identical results for the array-reshuffling kernels.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal


def im2col(x, kh, kw):
    """Unfold ``(N, C, H, W)`` into ``(N, H-kh+1, W-kw+1, C*kh*kw)`` patches."""
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, h - kh + 1, w - kw + 1, c * kh * kw)


def conv2d_direct(x, weight, bias):
    nout, c, kh, kw = weight.shape
    cols = im2col(x, kh, kw)
    out = cols @ weight.reshape(nout, -1).T + bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_direct_weight_grad(x, grad, kh, kw):
    nout = grad.shape[1]
    cols = im2col(x, kh, kw).astype(np.float64)
    g = grad.transpose(0, 2, 3, 1).reshape(-1, nout).astype(np.float64)
    dw = (g.T @ cols.reshape(g.shape[0], -1)).reshape(nout, x.shape[1], kh, kw)
    return dw, g.sum(axis=0)


def col2im(cols, c, h, w, kh, kw):
    """Scatter-add patch gradients back onto an ``(N, C, H, W)`` array."""
    n, ho, wo, _ = cols.shape
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    # descending offsets: matches the accumulation order of the compiled kernel
    for i in reversed(range(kh)):
        for j in reversed(range(kw)):
            out[:, :, i:i + ho, j:j + wo] += cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def maxpool2x2_forward(x):
    """2x2/stride-2 max pooling; returns the pooled array and the in-window argmax.

    The argmax is coded 0..3 in row-major window order; ties resolve to the
    first occurrence.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    v = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    v = v.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(v, axis=-1).astype(np.int8)
    out = np.take_along_axis(v, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx, h, w):
    n, c, ho, wo = grad.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    out = np.zeros((n, c, h, w), dtype=grad.dtype)
    out[:, :, :2 * ho, :2 * wo] = win
    return out


def sos_filter(x, sos):
    """Causal biquad cascade with zero initial state (direct form II transposed)."""
    return signal.sosfilt(np.asarray(sos, dtype=np.float64), np.asarray(x, dtype=np.float64))


def frame_mean(x, win, hop):
    """Mean of ``x`` over windows ``[l*hop, l*hop+win)`` along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = (x.shape[-1] - win) // hop + 1
    frames = sliding_window_view(x, win, axis=-1)[..., ::hop, :][..., :n_frames, :]
    return frames.mean(axis=-1)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad, out):
    return np.multiply(grad, out > 0, dtype=grad.dtype)


def channel_moments(x):
    """Per-channel mean and biased variance in float64."""
    xd = x.astype(np.float64)
    mean = xd.mean(axis=(0, 2, 3))
    var = ((xd - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def affine_normalize(x, mean, inv_std, scale, shift):
    dt = x.dtype
    bc = (1, -1, 1, 1)
    xhat = (x - mean.astype(dt).reshape(bc)) * inv_std.astype(dt).reshape(bc)
    out = xhat * np.asarray(scale, dt).reshape(bc) + np.asarray(shift, dt).reshape(bc)
    return xhat, out


def batchnorm_backward(grad, xhat, scale, inv_std):
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    sg = grad.astype(np.float64).sum(axis=(0, 2, 3))
    sgx = np.einsum("nchw,nchw->c", grad.astype(np.float64), xhat.astype(np.float64))
    dt = grad.dtype
    bc = (1, -1, 1, 1)
    k1 = (np.asarray(scale, np.float64) * inv_std).astype(dt).reshape(bc)
    dx = k1 * (grad - (sg / m).astype(dt).reshape(bc) - xhat * (sgx / m).astype(dt).reshape(bc))
    return dx, sgx, sg
