# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: convolution helpers, 2x2 max pooling, ReLU and
batch-norm passes, biquad cascades and frame means."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = w - kw + 1
    cdef Py_ssize_t b, y, z, ch, i, j, base
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, c * kh * kw), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(n):
            for y in range(ho):
                for ch in range(c):
                    for i in range(kh):
                        base = (ch * kh + i) * kw
                        for z in range(wo):
                            for j in range(kw):
                                o[b, y, z, base + j] = x[b, ch, y + i, z + j]
    return out


def conv2d_direct(real[:, :, :, ::1] x, real[:, :, :, ::1] weight, real[::1] bias):
    """Direct valid convolution; faster than im2col + GEMM for tiny C*kh*kw."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t nout = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = w - kw + 1
    cdef Py_ssize_t b, o, ch, i, j, y, z
    cdef real wv
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, nout, ho, wo), dtype=dtype)
    cdef real[:, :, :, ::1] r = out
    with nogil:
        for b in range(n):
            for o in range(nout):
                for y in range(ho):
                    for z in range(wo):
                        r[b, o, y, z] = bias[o]
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            wv = weight[o, ch, i, j]
                            for y in range(ho):
                                for z in range(wo):
                                    r[b, o, y, z] += wv * x[b, ch, y + i, z + j]
    return out


def conv2d_direct_weight_grad(real[:, :, :, ::1] x, real[:, :, :, ::1] grad,
                              Py_ssize_t kh, Py_ssize_t kw):
    """Returns (dweight, dbias) in float64. Per-sample partial sums run in
    the input precision; the sum over samples is accumulated in float64."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t nout = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    cdef Py_ssize_t b, o, ch, i, j, y, z
    cdef real acc
    dw = np.zeros((nout, c, kh, kw), dtype=np.float64)
    db = np.zeros(nout, dtype=np.float64)
    cdef double[:, :, :, ::1] d = dw
    cdef double[::1] dbv = db
    with nogil:
        for b in range(n):
            for o in range(nout):
                acc = 0
                for y in range(ho):
                    for z in range(wo):
                        acc = acc + grad[b, o, y, z]
                dbv[o] += acc
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc = 0
                            for y in range(ho):
                                for z in range(wo):
                                    acc = acc + grad[b, o, y, z] * x[b, ch, y + i, z + j]
                            d[o, ch, i, j] += acc
    return dw, db


def col2im(real[:, :, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t b, y, z, ch, i, j, p
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    # contributions to each output cell arrive with (i, j) descending, the
    # same order as the numpy fallback -> identical rounding
    with nogil:
        for b in range(n):
            for y in range(ho):
                for z in range(wo):
                    p = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                o[b, ch, y + i, z + j] += cols[b, y, z, p]
                                p = p + 1
    return out


def maxpool2x2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    cdef Py_ssize_t b, ch, y, z
    cdef real best, v
    cdef cnp.int8_t k
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] ix = idx
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for z in range(wo):
                        best = x[b, ch, 2 * y, 2 * z]
                        k = 0
                        v = x[b, ch, 2 * y, 2 * z + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, ch, 2 * y + 1, 2 * z]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, ch, 2 * y + 1, 2 * z + 1]
                        if v > best:
                            best = v
                            k = 3
                        o[b, ch, y, z] = best
                        ix[b, ch, y, z] = k
    return out, idx


def maxpool2x2_backward(real[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] idx,
                        Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    cdef Py_ssize_t b, ch, y, z
    cdef cnp.int8_t k
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for z in range(wo):
                        k = idx[b, ch, y, z]
                        o[b, ch, 2 * y + (k >> 1), 2 * z + (k & 1)] = grad[b, ch, y, z]
    return out


def sos_filter(x, sos):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] s = np.ascontiguousarray(sos, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], n_sec = s.shape[0], t, q
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    zi = np.zeros((n_sec, 2), dtype=np.float64)
    cdef double[:, ::1] z = zi
    cdef double xn, yn
    with nogil:
        for t in range(n):
            xn = xv[t]
            for q in range(n_sec):
                yn = s[q, 0] * xn + z[q, 0]
                z[q, 0] = s[q, 1] * xn - s[q, 4] * yn + z[q, 1]
                z[q, 1] = s[q, 2] * xn - s[q, 5] * yn
                xn = yn
            y[t] = xn
    return out


def frame_mean(x, Py_ssize_t win, Py_ssize_t hop):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    cdef double[:, ::1] a = arr
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t n_frames = (n - win) // hop + 1
    cdef Py_ssize_t r, l, t
    cdef double acc
    out = np.empty((rows, n_frames), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(rows):
            for l in range(n_frames):
                acc = 0.0
                for t in range(l * hop, l * hop + win):
                    acc = acc + a[r, t]
                o[r, l] = acc / win
    return out[0] if squeeze else out


def relu_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, y, z
    cdef real v
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    for z in range(w):
                        v = x[b, ch, y, z]
                        o[b, ch, y, z] = 0 if v <= 0 else v  # NaN passes through
    return out


def relu_backward(grad, out):
    # a vectorised multiply by the mask beats a per-element branch on
    # sign-random data
    return np.multiply(grad, np.asarray(out) > 0, dtype=np.asarray(grad).dtype)


def channel_moments(real[:, :, :, ::1] x):
    """Per-channel mean and biased variance (two-pass, double accumulators)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, y, z
    cdef double acc, d, mu
    cdef double m = n * h * w
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    cdef double[::1] mv = mean, vv = var
    with nogil:
        for ch in range(c):
            acc = 0.0
            for b in range(n):
                for y in range(h):
                    for z in range(w):
                        acc = acc + x[b, ch, y, z]
            mu = acc / m
            acc = 0.0
            for b in range(n):
                for y in range(h):
                    for z in range(w):
                        d = x[b, ch, y, z] - mu
                        acc = acc + d * d
            mv[ch] = mu
            vv[ch] = acc / m
    return mean, var


def affine_normalize(real[:, :, :, ::1] x, mean, inv_std, scale, shift):
    """Returns (xhat, xhat * scale + shift) per channel."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, y, z
    cdef double[::1] mu = np.ascontiguousarray(mean, dtype=np.float64)
    cdef double[::1] istd = np.ascontiguousarray(inv_std, dtype=np.float64)
    cdef double[::1] g = np.ascontiguousarray(scale, dtype=np.float64)
    cdef double[::1] s = np.ascontiguousarray(shift, dtype=np.float64)
    cdef real xh, mu_c, is_c, g_c, s_c
    dtype = np.float32 if real is float else np.float64
    xhat = np.empty((n, c, h, w), dtype=dtype)
    out = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] xo = xhat, oo = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                mu_c = <real>mu[ch]
                is_c = <real>istd[ch]
                g_c = <real>g[ch]
                s_c = <real>s[ch]
                for y in range(h):
                    for z in range(w):
                        xh = (x[b, ch, y, z] - mu_c) * is_c
                        xo[b, ch, y, z] = xh
                        oo[b, ch, y, z] = xh * g_c + s_c
    return xhat, out


def batchnorm_backward(real[:, :, :, ::1] grad, real[:, :, :, ::1] xhat, scale, inv_std):
    """Returns (dx, dscale, dshift) for train-mode batch normalisation."""
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], h = grad.shape[2], w = grad.shape[3]
    cdef Py_ssize_t b, ch, y, z
    cdef double[::1] g = np.ascontiguousarray(scale, dtype=np.float64)
    cdef double[::1] istd = np.ascontiguousarray(inv_std, dtype=np.float64)
    cdef double m = n * h * w
    cdef double sg, sgx, gv
    cdef real k1, k2, k3
    dscale = np.empty(c, dtype=np.float64)
    dshift = np.empty(c, dtype=np.float64)
    cdef double[::1] ds = dscale, dh = dshift
    dtype = np.float32 if real is float else np.float64
    dx = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] d = dx
    with nogil:
        for ch in range(c):
            sg = 0.0
            sgx = 0.0
            for b in range(n):
                for y in range(h):
                    for z in range(w):
                        gv = grad[b, ch, y, z]
                        sg = sg + gv
                        sgx = sgx + gv * xhat[b, ch, y, z]
            ds[ch] = sgx
            dh[ch] = sg
            # dx = scale*inv_std * (grad - sg/m - xhat * sgx/m)
            k1 = <real>(g[ch] * istd[ch])
            k2 = <real>(sg / m)
            k3 = <real>(sgx / m)
            for b in range(n):
                for y in range(h):
                    for z in range(w):
                        d[b, ch, y, z] = k1 * (grad[b, ch, y, z] - k2 - xhat[b, ch, y, z] * k3)
    return dx, dscale, dshift
