import numpy as np
import pytest

from dysphase.neuralnet import (
    ModelCheckpoint,
    ModelSpec,
    Network,
    build_dual_cnn,
    build_single_cnn,
    dual_cnn_spec,
    finite_difference_check,
)
from dysphase.neuralnet.network import branch_output_size, cnn_branch

K, B = 16, 12


def toy_inputs(n=4, seed=0):
    return np.random.default_rng(seed).standard_normal((n, K, B))


def test_full_size_shapes():
    spec = build_single_cnn()
    assert spec.input_shape == (81, 50)
    # 81x50 -conv2-> 80x49 -pool-> 40x24 -conv3-> 38x22 -pool-> 19x11, 64 channels
    assert branch_output_size(spec.branch, (81, 50)) == 64 * 19 * 11 == 13376
    assert spec.head == [{"type": "linear", "in": 13376, "out": 2}, {"type": "softmax"}]
    dual = dual_cnn_spec()
    assert dual.head[0] == {"type": "linear", "in": 26752, "out": 128}
    assert [d["type"] for d in dual.head] == ["linear", "relu", "linear", "softmax"]


def test_branch_layer_sequence():
    kinds = [d["type"] for d in cnn_branch()]
    assert kinds == ["conv2d", "relu", "batchnorm2d", "maxpool2d",
                     "conv2d", "relu", "batchnorm2d", "maxpool2d", "dropout", "flatten"]


def test_parameter_count():
    net = Network(build_single_cnn(), seed=0)
    conv = (64 * 4 + 64) + (64 * 64 * 9 + 64)
    bn = 2 * 64 * 2
    assert net.n_params() == conv + bn + 13376 * 2 + 2


def test_toy_size_and_too_small_input():
    assert branch_output_size(cnn_branch(), (K, B)) == 64 * 2 * 1
    with pytest.raises(ValueError, match="too small"):
        build_single_cnn(6, 6)


def test_spec_validation_and_descriptor_round_trip():
    spec = build_single_cnn(K, B)
    assert ModelSpec.from_descriptors(spec.descriptors()) == spec
    with pytest.raises(ValueError):
        ModelSpec("single", (K, B), spec.branch, spec.head[:-1])
    with pytest.raises(ValueError):
        ModelSpec("triple", (K, B), spec.branch, spec.head)


def test_forward_shapes_and_probabilities():
    net = Network(build_single_cnn(K, B), seed=1)
    x = toy_inputs(5)
    assert net.forward(x).shape == (5, 2)
    p = net.predict_proba(x, batch_size=2)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
    # eval mode is deterministic and independent of batching
    np.testing.assert_allclose(p, net.predict_proba(x), rtol=1e-6)
    with pytest.raises(ValueError):
        net.forward([x, x])


def test_same_seed_same_weights():
    a = Network(build_single_cnn(K, B), seed=3).state()
    b = Network(build_single_cnn(K, B), seed=3).state()
    c = Network(build_single_cnn(K, B), seed=4).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["branch0.0.weight"], c["branch0.0.weight"])


def trained_like(seed):
    net = Network(build_single_cnn(K, B), seed=seed)
    rng = np.random.default_rng(seed)
    for _, layer, key in net.named_buffers():
        layer.buffers[key][...] = rng.uniform(0.5, 2.0, layer.buffers[key].shape)
    return net


def test_dual_copies_branch_weights_exactly():
    a, b = trained_like(5), trained_like(6)
    dual = build_dual_cnn(a, b, seed=7)
    sa, sb, sd = a.state(), b.state(), dual.state()
    for name in sa:
        if name.startswith("branch0."):
            assert np.array_equal(sd[name], sa[name])
            assert np.array_equal(sd[name.replace("branch0.", "branch1.", 1)], sb[name])
    # also from checkpoints
    dual2 = build_dual_cnn(ModelCheckpoint.from_network(a), ModelCheckpoint.from_network(b), seed=7)
    assert all(np.array_equal(dual2.state()[k], sd[k]) for k in sd)


def test_dual_rejects_mismatched_branches():
    with pytest.raises(ValueError, match="incompatible"):
        build_dual_cnn(Network(build_single_cnn(K, B)), Network(build_single_cnn(K + 2, B)))
    dual = build_dual_cnn(Network(build_single_cnn(K, B)), Network(build_single_cnn(K, B)))
    with pytest.raises(ValueError):
        build_dual_cnn(dual, dual)


def test_dual_forward_uses_both_inputs():
    dual = build_dual_cnn(trained_like(1), trained_like(2), seed=0)
    x1, x2 = toy_inputs(3, 1), toy_inputs(3, 2)
    base = dual.forward([x1, x2])
    assert base.shape == (3, 2)
    assert not np.allclose(base, dual.forward([x1, x1]))
    assert not np.allclose(base, dual.forward([x2, x2]))


def test_state_round_trip():
    a, b = Network(build_single_cnn(K, B), seed=1), Network(build_single_cnn(K, B), seed=2)
    b.load_state(a.state())
    np.testing.assert_array_equal(a.forward(toy_inputs()), b.forward(toy_inputs()))


def test_single_network_gradcheck():
    net = Network(build_single_cnn(K, B), seed=0, dtype=np.float64)
    err = finite_difference_check(net, toy_inputs(), [0, 1, 0, 1], max_per_tensor=24)
    assert err < 1e-3
    assert set(net.last_gradcheck) == {n for n, _, _ in net.named_params()}


def test_dual_network_gradcheck():
    a = Network(build_single_cnn(K, B), seed=1, dtype=np.float64)
    b = Network(build_single_cnn(K, B), seed=2, dtype=np.float64)
    dual = build_dual_cnn(a, b, seed=3, dtype=np.float64)
    err = finite_difference_check(dual, [toy_inputs(4, 1), toy_inputs(4, 2)], [1, 0, 1, 0], max_per_tensor=24)
    assert err < 1e-3


def test_gradcheck_detects_a_wrong_gradient(monkeypatch):
    """The check is not vacuous: a corrupted backward pass is caught."""
    from dysphase.neuralnet import layers

    net = Network(build_single_cnn(K, B), seed=0, dtype=np.float64)
    orig = layers.Linear.backward

    def bad(self, grad):
        out = orig(self, grad)
        self.grads["bias"] *= 1.5
        return out

    monkeypatch.setattr(layers.Linear, "backward", bad)
    assert finite_difference_check(net, toy_inputs(), [0, 1, 0, 1], max_per_tensor=4) > 0.1


def test_gradcheck_skips_only_stencils_that_cross_a_kink():
    net = Network(build_single_cnn(K, B), seed=1, dtype=np.float64)
    checked = sum(min(24, layer.params[key].size) for _, layer, key in net.named_params())
    # a coarse step crosses many ReLU or max-pool boundaries
    finite_difference_check(net, toy_inputs(4, 5), [0, 1, 0, 1], eps=1e-3, max_per_tensor=24)
    assert sum(net.last_gradcheck_skipped.values()) > 0
    # the default step rarely does
    err = finite_difference_check(net, toy_inputs(4, 5), [0, 1, 0, 1], max_per_tensor=24)
    assert set(net.last_gradcheck_skipped) == set(net.last_gradcheck)
    assert sum(net.last_gradcheck_skipped.values()) < 0.05 * checked
    assert err < 1e-3
