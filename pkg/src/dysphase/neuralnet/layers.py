"""Layers with explicit forward/backward passes over NCHW arrays."""
from __future__ import annotations

import numpy as np

from .. import kernels

# upper bound on im2col buffer elements per chunk (~64 MB in float32)
_COLS_BUDGET = 1 << 24
# convolutions with at most this many taps per output skip im2col
_DIRECT_MAX_TAPS = 16


class Layer:
    """Base layer. ``params``/``grads`` map names to arrays; ``buffers``
    holds non-trainable state that is still checkpointed."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def descriptor(self) -> dict:
        return {"type": self.kind}

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias_uniform(rng, n, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(dtype)


class Conv2D(Layer):
    """Valid-padding, stride-1 2-D convolution via im2col + GEMM."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.in_ch, self.out_ch, self.kh, self.kw = int(in_ch), int(out_ch), int(kh), int(kw)
        fan_in = self.in_ch * self.kh * self.kw
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _kaiming_uniform(rng, (self.out_ch, self.in_ch, self.kh, self.kw), fan_in, dtype)
        self.params["bias"] = _bias_uniform(rng, self.out_ch, fan_in, dtype)
        self.needs_input_grad = True
        self._cols = None
        self.zero_grad()

    def descriptor(self):
        return {"type": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": [self.kh, self.kw]}

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ValueError(f"conv2d expects {self.in_ch} input channels, got {c}")
        ho, wo = h - self.kh + 1, w - self.kw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} smaller than {self.kh}x{self.kw} kernel")
        return (self.out_ch, ho, wo)

    def _chunks(self, n, ho, wo):
        per = ho * wo * self.in_ch * self.kh * self.kw
        step = max(1, _COLS_BUDGET // max(per, 1))
        return [(s, min(n, s + step)) for s in range(0, n, step)]

    @property
    def _direct(self):
        return self.in_ch * self.kh * self.kw <= _DIRECT_MAX_TAPS

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv2d expects (N, {self.in_ch}, H, W) input, got {x.shape}")
        self._x = x
        self._cols = None
        if self._direct:
            return kernels.conv2d_direct(x, self.params["weight"], self.params["bias"])
        n, _, h, w = x.shape
        ho, wo = h - self.kh + 1, w - self.kw + 1
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        out = np.empty((n, ho, wo, self.out_ch), dtype=x.dtype)
        self._cols = [] if train else None  # reused by backward
        for s, e in self._chunks(n, ho, wo):
            cols = kernels.im2col(x[s:e], self.kh, self.kw)
            out[s:e] = cols @ wmat.T
            if train:
                self._cols.append(cols)
        out += self.params["bias"]
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        x = self._x
        n, c, h, w = x.shape
        ho, wo = grad.shape[2], grad.shape[3]
        wmat = self.params["weight"].reshape(self.out_ch, -1)
        if self._direct and not self.needs_input_grad:
            dw, db = kernels.conv2d_direct_weight_grad(x, grad, self.kh, self.kw)
            self.grads["weight"] += dw.astype(wmat.dtype)
            self.grads["bias"] += db.astype(wmat.dtype)
            return None
        g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1))  # (N, Ho, Wo, O)
        dw = np.zeros_like(wmat)
        dx = np.empty_like(x) if self.needs_input_grad else None
        cached = self._cols
        self._cols = None
        for ci, (s, e) in enumerate(self._chunks(n, ho, wo)):
            cols = cached[ci] if cached else kernels.im2col(x[s:e], self.kh, self.kw)
            gs = g[s:e].reshape(-1, self.out_ch)
            dw += gs.T @ cols.reshape(-1, wmat.shape[1])
            if dx is not None:
                dcols = (gs @ wmat).reshape(e - s, ho, wo, -1)
                dx[s:e] = kernels.col2im(dcols, c, h, w, self.kh, self.kw)
        self.grads["weight"] += dw.reshape(self.params["weight"].shape)
        self.grads["bias"] += g.reshape(-1, self.out_ch).sum(axis=0)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        out = kernels.relu_forward(x) if x.ndim == 4 else np.maximum(x, 0)
        self._out = out
        return out

    def backward(self, grad):
        if grad.ndim == 4:
            return kernels.relu_backward(grad, self._out)
        return np.where(self._out > 0, grad, 0).astype(grad.dtype, copy=False)


class BatchNorm2D(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = int(channels), float(eps), float(momentum)
        self.params["scale"] = np.ones(self.channels, dtype=dtype)
        self.params["shift"] = np.zeros(self.channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.channels, dtype=dtype)
        self.zero_grad()

    def descriptor(self):
        return {"type": self.kind, "channels": self.channels}

    def output_shape(self, shape):
        if shape[0] != self.channels:
            raise ValueError(f"batchnorm2d expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x, train=False):
        scale, shift = self.params["scale"], self.params["shift"]
        if not train:
            mean = self.buffers["running_mean"].astype(np.float64)
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"].astype(np.float64) + self.eps)
            xhat, out = kernels.affine_normalize(x, mean, inv_std, scale, shift)
            self._xhat, self._inv_std, self._frozen_stats = xhat, inv_std, True
            return out
        if x.shape[0] < 2:
            raise ValueError("batchnorm2d in train mode needs a batch of at least 2")
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean, var = kernels.channel_moments(x)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat, out = kernels.affine_normalize(x, mean, inv_std, scale, shift)
        mom = self.momentum
        rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
        rm[...] = (1 - mom) * rm + mom * mean
        rv[...] = (1 - mom) * rv + mom * var * m / max(m - 1, 1)
        self._xhat, self._inv_std, self._frozen_stats = xhat, inv_std, False
        return out

    def backward(self, grad):
        if self._frozen_stats:
            # eval mode: a fixed per-channel affine map
            bc = (1, -1, 1, 1)
            k = (self.params["scale"].astype(np.float64) * self._inv_std).astype(grad.dtype)
            self.grads["scale"] += np.einsum("nchw,nchw->c", grad, self._xhat).astype(self.grads["scale"].dtype)
            self.grads["shift"] += grad.sum(axis=(0, 2, 3)).astype(self.grads["shift"].dtype)
            return grad * k.reshape(bc)
        dx, dscale, dshift = kernels.batchnorm_backward(grad, self._xhat, self.params["scale"], self._inv_std)
        self.grads["scale"] += dscale.astype(self.grads["scale"].dtype)
        self.grads["shift"] += dshift.astype(self.grads["shift"].dtype)
        return dx


class MaxPool2D(Layer):
    """2x2 max pooling, stride 2, floor on odd sizes; ties go to the first
    element in row-major window order."""

    kind = "maxpool2d"

    def descriptor(self):
        return {"type": self.kind, "kernel": 2}

    def output_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ValueError(f"maxpool2d needs spatial dims >= 2, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False):
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ValueError(f"maxpool2d needs spatial dims >= 2, got {x.shape[2:]}")
        out, idx = kernels.maxpool2x2_forward(x)
        self._idx, self._hw = idx, x.shape[2:]
        return out

    def backward(self, grad):
        return kernels.maxpool2x2_backward(grad, self._idx, *self._hw)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = float(rate)
        self.rng = np.random.default_rng(0)
        self.frozen_mask = None

    def descriptor(self):
        return {"type": self.kind, "rate": self.rate}

    def draw_mask(self, shape, dtype):
        keep = self.rng.random(shape) >= self.rate
        return keep.astype(dtype) / dtype.type(1.0 - self.rate)

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        mask = self.frozen_mask if self.frozen_mask is not None else self.draw_mask(x.shape, x.dtype)
        self._mask = mask
        return x * mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = int(in_features), int(out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _kaiming_uniform(rng, (self.out_features, self.in_features), self.in_features, dtype)
        self.params["bias"] = _bias_uniform(rng, self.out_features, self.in_features, dtype)
        self.needs_input_grad = True
        self.zero_grad()

    def descriptor(self):
        return {"type": self.kind, "in": self.in_features, "out": self.out_features}

    def output_shape(self, shape):
        if shape != (self.in_features,):
            raise ValueError(f"linear expects {self.in_features} features, got {shape}")
        return (self.out_features,)

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        self.grads["weight"] += grad.T @ self._x
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"] if self.needs_input_grad else None


class Softmax(Layer):
    """Output marker; fused with the cross-entropy loss during training."""

    kind = "softmax"

    def forward(self, x, train=False):
        return softmax(x)

    def backward(self, grad):
        raise RuntimeError("softmax is fused into softmax_cross_entropy; no standalone backward")


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, onehot):
    """Mean cross-entropy over the batch, class probabilities and d loss/d logits."""
    onehot = np.asarray(onehot)
    if onehot.shape != logits.shape:
        raise ValueError(f"labels shape {onehot.shape} does not match logits {logits.shape}")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    loss = float(-(onehot * logp).sum() / n)
    probs = np.exp(logp)
    grad = ((probs - onehot) / n).astype(logits.dtype, copy=False)
    return loss, probs, grad


def one_hot(labels, n_classes=2, dtype=np.float32):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


LAYER_TYPES = {
    cls.kind: cls for cls in (Conv2D, ReLU, BatchNorm2D, MaxPool2D, Dropout, Flatten, Linear, Softmax)
}


def layer_from_descriptor(d: dict, rng, dtype) -> Layer:
    t = d["type"]
    if t == "conv2d":
        return Conv2D(d["in_ch"], d["out_ch"], tuple(d["kernel"]), rng, dtype)
    if t == "batchnorm2d":
        return BatchNorm2D(d["channels"], dtype=dtype)
    if t == "dropout":
        return Dropout(d["rate"])
    if t == "linear":
        return Linear(d["in"], d["out"], rng, dtype)
    if t == "maxpool2d":
        if d.get("kernel", 2) != 2:
            raise ValueError("only 2x2 max pooling is supported")
        return MaxPool2D()
    if t in LAYER_TYPES:
        return LAYER_TYPES[t]()
    raise ValueError(f"unknown layer type {t!r}")
