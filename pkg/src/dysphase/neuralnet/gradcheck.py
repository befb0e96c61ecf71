"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .layers import Dropout, Layer, MaxPool2D, ReLU
from .network import Network

REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def freeze_dropout(net: Network, inputs):
    """Draw one dropout mask per dropout layer and reuse it on every forward pass."""
    for layer in net.layers():
        if isinstance(layer, Dropout):
            layer.frozen_mask = None
    xs = net._inputs(inputs)
    for layers, a in zip(net.branches, xs):
        for layer in layers:
            if isinstance(layer, Dropout):
                layer.frozen_mask = layer.draw_mask(a.shape, a.dtype)
            a = layer.forward(a, train=True)


def activation_pattern(net: Network) -> list[np.ndarray]:
    """ReLU on/off masks and max-pool argmax indices of the last forward pass."""
    out = []
    for layer in net.layers():
        if isinstance(layer, ReLU):
            out.append(layer._out > 0)
        elif isinstance(layer, MaxPool2D):
            out.append(layer._idx.copy())
    return out


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _sample_indices(size, limit, rng):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def finite_difference_check(net: Network, inputs, labels, eps=1e-5, max_per_tensor=None, seed=0):
    """Largest relative error between backprop and central differences over
    the network's parameters.

    The network should be float64. Dropout masks are frozen first;
    batchnorm stays in train mode on the fixed batch. ``max_per_tensor``
    caps the number of checked entries in each parameter tensor (sampled
    with ``seed``); ``None`` checks every entry.

    An entry whose +-eps stencil flips a ReLU or moves a max-pool argmax
    straddles a point where the loss is not differentiable; it is skipped
    and counted in ``net.last_gradcheck_skipped``.
    """
    rng = np.random.default_rng(seed)
    freeze_dropout(net, inputs)
    net.zero_grad()
    loss0, _ = net.loss_and_grad(inputs, labels, train=True)
    if not np.isfinite(loss0):
        raise ValueError("non-finite loss in gradient check")
    base = activation_pattern(net)
    worst = 0.0
    per_tensor, skipped = {}, {}
    for name, layer, key in net.named_params():
        w = layer.params[key]
        analytic = layer.grads[key].copy()
        flat = w.reshape(-1)
        errs = []
        skipped[name] = 0
        for i in _sample_indices(flat.size, max_per_tensor, rng):
            old = flat[i]
            flat[i] = old + eps
            lp = net.evaluate_train_loss(inputs, labels)
            smooth = _same_pattern(base, activation_pattern(net))
            flat[i] = old - eps
            lm = net.evaluate_train_loss(inputs, labels)
            smooth = smooth and _same_pattern(base, activation_pattern(net))
            flat[i] = old
            if not smooth:
                skipped[name] += 1
                continue
            num = (lp - lm) / (2 * eps)
            errs.append(float(relative_error(analytic.reshape(-1)[i], num)))
        per_tensor[name] = max(errs) if errs else 0.0
        worst = max(worst, per_tensor[name])
    net.last_gradcheck = per_tensor
    net.last_gradcheck_skipped = skipped
    return worst


def check_layer(layer: Layer, x, eps=1e-6, seed=0, train=True):
    """Gradient check of one layer under the loss ``sum(R * layer(x))`` with a
    fixed random ``R``. Returns the max relative error over the input and
    all parameters."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, train)
    R = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(R * layer.forward(x, train)))

    layer.zero_grad()
    layer.forward(x, train)
    dx = layer.backward(R)
    worst = 0.0
    targets = [("input", x, dx)] + [(k, layer.params[k], layer.grads[k].copy()) for k in layer.params]
    for _, arr, grad in targets:
        if grad is None:
            continue
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            num[i] = (lp - lm) / (2 * eps)
        worst = max(worst, float(relative_error(grad.reshape(-1), num).max()))
    return worst
