import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dysphase.neuralnet import (
    BatchNorm2D,
    Conv2D,
    Dropout,
    Flatten,
    Linear,
    MaxPool2D,
    ReLU,
    Softmax,
    check_layer,
    one_hot,
    relative_error,
    softmax,
    softmax_cross_entropy,
)
from dysphase.neuralnet.layers import LAYER_TYPES, layer_from_descriptor

TOL = 1e-6


def rng(seed=0):
    return np.random.default_rng(seed)


def conv_oracle(x, w, b):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for i in range(h - kh + 1):
        for j in range(wd - kw + 1):
            patch = x[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
    return out


@pytest.mark.parametrize("cin,cout,k", [(1, 4, 2), (3, 5, 3), (2, 2, (2, 3))])
def test_conv_forward_matches_loops(cin, cout, k):
    layer = Conv2D(cin, cout, k, rng(1), np.float64)
    x = rng(2).standard_normal((3, cin, 7, 6))
    np.testing.assert_allclose(layer.forward(x), conv_oracle(x, layer.params["weight"], layer.params["bias"]),
                               atol=1e-12)


def test_conv_chunked_path_matches_unchunked(monkeypatch):
    from dysphase.neuralnet import layers

    layer = Conv2D(3, 4, 3, rng(3), np.float64)
    x = rng(4).standard_normal((5, 3, 9, 8))
    g = rng(5).standard_normal((5, 4, 7, 6))
    ref = layer.forward(x, train=True)
    layer.zero_grad()
    dx_ref = layer.backward(g)
    dw_ref = layer.grads["weight"].copy()
    monkeypatch.setattr(layers, "_COLS_BUDGET", 7 * 6 * 27 * 2)  # two samples per chunk
    layer.zero_grad()
    np.testing.assert_allclose(layer.forward(x, train=True), ref, atol=1e-12)
    np.testing.assert_allclose(layer.backward(g), dx_ref, atol=1e-12)
    np.testing.assert_allclose(layer.grads["weight"], dw_ref, atol=1e-12)


@pytest.mark.parametrize("cin,cout,k,input_grad", [(1, 3, 2, False), (1, 3, 2, True), (2, 3, 3, True)])
def test_conv_gradcheck(cin, cout, k, input_grad):
    layer = Conv2D(cin, cout, k, rng(6), np.float64)
    layer.needs_input_grad = input_grad
    x = rng(7).standard_normal((2, cin, 5, 6))
    assert check_layer(layer, x) < TOL


def test_conv_rejects_wrong_channels():
    layer = Conv2D(2, 3, 2)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((1, 1, 4, 4), np.float32))
    with pytest.raises(ValueError):
        layer.output_shape((2, 1, 4))


def test_kaiming_uniform_bounds():
    layer = Conv2D(64, 64, 3, rng(8))
    w = layer.params["weight"]
    bound = np.sqrt(6 / (64 * 9))
    assert np.abs(w).max() <= bound
    # uniform(-a, a) has variance a^2/3 = 2/fan_in
    assert w.var() == pytest.approx(2 / (64 * 9), rel=0.03)
    assert np.abs(layer.params["bias"]).max() <= 1 / np.sqrt(64 * 9)


def test_relu_gradcheck_and_values():
    x = rng(9).standard_normal((2, 3, 4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    layer = ReLU()
    np.testing.assert_array_equal(layer.forward(x), np.maximum(x, 0))
    assert check_layer(layer, x) < TOL
    assert check_layer(ReLU(), x.reshape(2, -1)) < TOL


def test_batchnorm_train_gradcheck():
    layer = BatchNorm2D(3, dtype=np.float64)
    layer.params["scale"][:] = [0.5, 1.5, -1.0]
    layer.params["shift"][:] = [0.1, -0.2, 0.3]
    x = rng(10).standard_normal((4, 3, 3, 2)) * 2 + 1
    assert check_layer(layer, x, train=True) < TOL


def test_batchnorm_eval_gradcheck_and_formula():
    layer = BatchNorm2D(2, dtype=np.float64)
    layer.buffers["running_mean"][:] = [1.0, -1.0]
    layer.buffers["running_var"][:] = [4.0, 0.25]
    x = rng(11).standard_normal((3, 2, 2, 2))
    out = layer.forward(x, train=False)
    expect = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
        np.array([4.0, 0.25]) + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(out, expect, rtol=1e-12)
    assert check_layer(layer, x, train=False) < TOL


def test_batchnorm_running_stats_geometric_series():
    """Feeding one batch T times: running_mean = (1 - 0.9^T) * batch mean and
    running_var = 0.9^T + (1 - 0.9^T) * unbiased batch variance."""
    layer = BatchNorm2D(2, dtype=np.float64)
    x = rng(12).standard_normal((4, 2, 3, 3)) + np.array([2.0, -3.0])[None, :, None, None]
    T = 7
    for _ in range(T):
        layer.forward(x, train=True)
    mean = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    d = 0.9 ** T
    np.testing.assert_allclose(layer.buffers["running_mean"], (1 - d) * mean, rtol=1e-12)
    np.testing.assert_allclose(layer.buffers["running_var"], d + (1 - d) * var_unbiased, rtol=1e-12)


def test_batchnorm_train_output_standardized():
    layer = BatchNorm2D(3, dtype=np.float64)
    out = layer.forward(rng(13).standard_normal((5, 3, 4, 4)) * 3 + 2, train=True)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    with pytest.raises(ValueError, match="at least 2"):
        layer.forward(np.ones((1, 3, 2, 2)), train=True)


def test_maxpool_values_ties_and_odd_sizes():
    x = np.array([[[[1, 3, 2, 0, 9],
                    [4, 4, 1, 5, 9],
                    [7, 7, 7, 7, 9]]]], dtype=np.float64)
    layer = MaxPool2D()
    out = layer.forward(x)
    np.testing.assert_array_equal(out, [[[[4, 5]]]])
    g = layer.backward(np.array([[[[10.0, 20.0]]]]))
    expect = np.zeros_like(x)
    expect[0, 0, 1, 0] = 10.0  # first of the tied 4s
    expect[0, 0, 1, 3] = 20.0
    np.testing.assert_array_equal(g, expect)


def test_maxpool_gradcheck():
    x = rng(14).permutation(2 * 3 * 5 * 7).reshape(2, 3, 5, 7).astype(np.float64) / 10
    assert check_layer(MaxPool2D(), x) < TOL


def test_dropout_mask_statistics():
    layer = Dropout(0.5)
    layer.rng = rng(15)
    x = np.ones((200, 500))
    out = layer.forward(x, train=True)
    dropped = np.mean(out == 0)
    n = x.size
    assert abs(dropped - 0.5) < 4 * np.sqrt(0.25 / n)
    assert set(np.unique(out)) == {0.0, 2.0}
    np.testing.assert_array_equal(layer.forward(x, train=False), x)


def test_dropout_frozen_gradcheck():
    layer = Dropout(0.3)
    x = rng(16).standard_normal((3, 4))
    layer.frozen_mask = layer.draw_mask(x.shape, x.dtype)
    assert check_layer(layer, x) < TOL
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_flatten_and_linear_gradcheck():
    x = rng(17).standard_normal((3, 2, 2, 3))
    assert check_layer(Flatten(), x) < TOL
    lin = Linear(5, 4, rng(18), np.float64)
    assert check_layer(lin, rng(19).standard_normal((3, 5))) < TOL
    with pytest.raises(ValueError):
        lin.output_shape((6,))


def test_softmax_cross_entropy_gradient():
    logits = rng(20).standard_normal((5, 2))
    y = one_hot([0, 1, 1, 0, 1], 2, np.float64)
    loss, probs, grad = softmax_cross_entropy(logits, y)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert loss == pytest.approx(-np.mean(np.log(probs[np.arange(5), [0, 1, 1, 0, 1]])))
    eps = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += eps
        lm[idx] -= eps
        num[idx] = (softmax_cross_entropy(lp, y)[0] - softmax_cross_entropy(lm, y)[0]) / (2 * eps)
    assert relative_error(grad, num).max() < TOL


def test_softmax_stable_and_labels_validated():
    p = softmax(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]))
    np.testing.assert_allclose(p, [[0.5, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 2)), np.array([[1, 1], [0, 1]]))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(RuntimeError):
        Softmax().backward(np.zeros((1, 2)))


def test_descriptor_round_trip():
    r = rng(21)
    for layer in (Conv2D(2, 3, (2, 3), r), BatchNorm2D(4), MaxPool2D(), Dropout(0.25), Linear(3, 2, r),
                  ReLU(), Flatten(), Softmax()):
        again = layer_from_descriptor(layer.descriptor(), r, np.float32)
        assert type(again) is type(layer)
        assert again.descriptor() == layer.descriptor()
    assert set(LAYER_TYPES) == {"conv2d", "relu", "batchnorm2d", "maxpool2d", "dropout", "flatten", "linear",
                                "softmax"}
    with pytest.raises(ValueError):
        layer_from_descriptor({"type": "lstm"}, r, np.float32)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 3))
def test_pool_output_shape_property(h, w, c):
    x = rng(h * 100 + w).standard_normal((1, c, h, w))
    out = MaxPool2D().forward(x)
    assert out.shape == (1, c, h // 2, w // 2)
    assert MaxPool2D().output_shape((c, h, w)) == (c, h // 2, w // 2)
    np.testing.assert_array_equal(out, x[:, :, :h // 2 * 2, :w // 2 * 2].reshape(1, c, h // 2, 2, w // 2, 2)
                                  .max(axis=(3, 5)))
