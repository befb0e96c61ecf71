"""Model specifications, the single/dual network container and the two
architecture builders."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Dropout, Layer, Softmax, layer_from_descriptor, one_hot, softmax, softmax_cross_entropy


@dataclass
class ModelSpec:
    """Layer descriptors for a single-input (one branch) or dual-input
    (two identical-shape branches) network.

    ``branch`` maps a ``(1, K, B)`` input to a flat feature vector; ``head``
    consumes the (concatenated) branch outputs and ends in a softmax.
    """

    kind: str
    input_shape: tuple[int, int]
    branch: list[dict]
    head: list[dict]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.kind not in ("single", "dual"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        kinds = [d["type"] for d in self.branch + self.head]
        if kinds.count("softmax") != 1 or self.head[-1]["type"] != "softmax":
            raise ValueError("a model needs exactly one softmax, at the output")

    @property
    def n_branches(self) -> int:
        return 2 if self.kind == "dual" else 1

    def descriptors(self) -> list[dict]:
        head = {"type": "model", "kind": self.kind, "input_shape": list(self.input_shape),
                "n_branch": len(self.branch), "n_head": len(self.head)}
        return [head] + self.branch + self.head

    @classmethod
    def from_descriptors(cls, descs: list[dict]) -> "ModelSpec":
        h = descs[0]
        nb = h["n_branch"]
        return cls(h["kind"], tuple(h["input_shape"]), descs[1:1 + nb], descs[1 + nb:1 + nb + h["n_head"]])


def shape_chain(layers: list[Layer], shape):
    """Per-layer output shapes, raising ``ValueError`` on incompatibility."""
    shapes = []
    for layer in layers:
        shape = layer.output_shape(shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"{layer.kind} produces degenerate shape {shape}")
        shapes.append(shape)
    return shapes


def _conv_block(in_ch, out_ch, kernel):
    return [
        {"type": "conv2d", "in_ch": in_ch, "out_ch": out_ch, "kernel": [kernel, kernel]},
        {"type": "relu"},
        {"type": "batchnorm2d", "channels": out_ch},
        {"type": "maxpool2d", "kernel": 2},
    ]


def cnn_branch(channels=64, dropout=0.5) -> list[dict]:
    return (
        _conv_block(1, channels, 2)
        + _conv_block(channels, channels, 3)
        + [{"type": "dropout", "rate": dropout}, {"type": "flatten"}]
    )


def branch_output_size(branch: list[dict], input_shape) -> int:
    layers = [layer_from_descriptor(d, np.random.default_rng(0), np.float32) for d in branch]
    try:
        shapes = shape_chain(layers, (1,) + tuple(input_shape))
    except ValueError as exc:
        raise ValueError(f"input {tuple(input_shape)} too small for the layer stack: {exc}") from None
    return int(shapes[-1][0])


def build_single_cnn(K=81, B=50, channels=64, dropout=0.5) -> ModelSpec:
    """Two conv/ReLU/batchnorm/max-pool blocks, dropout, and a 2-way linear
    output. The flatten size follows from valid-padding shape arithmetic
    (64 x 19 x 11 = 13376 for K=81, B=50)."""
    branch = cnn_branch(channels, dropout)
    flat = branch_output_size(branch, (K, B))
    head = [{"type": "linear", "in": flat, "out": 2}, {"type": "softmax"}]
    return ModelSpec("single", (K, B), branch, head)


def _fusion_head(flat, hidden):
    return [
        {"type": "linear", "in": 2 * flat, "out": hidden},
        {"type": "relu"},
        {"type": "linear", "in": hidden, "out": 2},
        {"type": "softmax"},
    ]


def dual_cnn_spec(K=81, B=50, channels=64, dropout=0.5, hidden=128) -> ModelSpec:
    branch = cnn_branch(channels, dropout)
    return ModelSpec("dual", (K, B), branch, _fusion_head(branch_output_size(branch, (K, B)), hidden))


class Network:
    """Instantiated model. ``forward`` takes one array ``(N, K, B)`` for
    single models and a pair of arrays for dual models."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(self.seed)
        self.branches = [
            [layer_from_descriptor(d, self.rng, self.dtype) for d in spec.branch]
            for _ in range(spec.n_branches)
        ]
        self.head = [layer_from_descriptor(d, self.rng, self.dtype) for d in spec.head]
        for layers in self.branches:
            shape_chain(layers, (1,) + spec.input_shape)
        flat = sum(shape_chain(b, (1,) + spec.input_shape)[-1][0] for b in self.branches)
        shape_chain(self.head, (flat,))
        for layer in self.layers():
            if isinstance(layer, Dropout):
                layer.rng = self.rng
        # the first layer of each branch never needs an input gradient
        for layers in self.branches:
            if hasattr(layers[0], "needs_input_grad"):
                layers[0].needs_input_grad = False

    def layers(self):
        for b in self.branches:
            yield from b
        yield from self.head

    def named_layers(self):
        for i, b in enumerate(self.branches):
            for j, layer in enumerate(b):
                yield f"branch{i}.{j}", layer
        for j, layer in enumerate(self.head):
            yield f"head.{j}", layer

    def named_params(self):
        """(name, layer, key) triples in declaration order."""
        for name, layer in self.named_layers():
            for key in layer.params:
                yield f"{name}.{key}", layer, key

    def named_buffers(self):
        for name, layer in self.named_layers():
            for key in layer.buffers:
                yield f"{name}.{key}", layer, key

    def n_params(self) -> int:
        return sum(layer.params[k].size for _, layer, k in self.named_params())

    def zero_grad(self):
        for layer in self.layers():
            layer.zero_grad()

    def _inputs(self, x):
        xs = list(x) if isinstance(x, (tuple, list)) else [x]
        if len(xs) != len(self.branches):
            raise ValueError(f"expected {len(self.branches)} input arrays, got {len(xs)}")
        out = []
        for a in xs:
            a = np.asarray(a, dtype=self.dtype)
            if a.ndim == 3:
                a = a[:, None]
            out.append(np.ascontiguousarray(a))
        return out

    def forward(self, x, train=False):
        """Logits, shape ``(N, 2)``."""
        feats = []
        for layers, a in zip(self.branches, self._inputs(x)):
            for layer in layers:
                a = layer.forward(a, train)
            feats.append(a)
        self._split = [f.shape[1] for f in feats]
        h = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=1)
        for layer in self.head:
            if isinstance(layer, Softmax):
                break
            h = layer.forward(h, train)
        return h

    def backward(self, grad):
        for layer in reversed(self.head):
            if isinstance(layer, Softmax):
                continue
            grad = layer.backward(grad)
        offs = np.cumsum([0] + self._split)
        for i, layers in enumerate(self.branches):
            g = grad[:, offs[i]:offs[i + 1]]
            for layer in reversed(layers):
                g = layer.backward(g)
                if g is None:
                    break

    def predict_proba(self, x, batch_size=256):
        xs = self._inputs(x)
        n = xs[0].shape[0]
        out = []
        for s in range(0, n, batch_size):
            chunk = [a[s:s + batch_size] for a in xs]
            out.append(softmax(self.forward(chunk if len(chunk) > 1 else chunk[0], train=False)))
        return np.concatenate(out, axis=0) if out else np.zeros((0, 2), dtype=self.dtype)

    def loss_and_grad(self, x, labels, train=True):
        """Forward + backward on one batch; gradients accumulate into ``layer.grads``."""
        logits = self.forward(x, train)
        loss, probs, grad = softmax_cross_entropy(logits, one_hot(labels, 2, self.dtype))
        self.backward(grad)
        return loss, probs

    def evaluate_train_loss(self, x, labels):
        """Batch loss in train mode, without a backward pass."""
        logits = self.forward(x, train=True)
        return softmax_cross_entropy(logits, one_hot(labels, 2, self.dtype))[0]

    def evaluate_loss(self, x, labels, batch_size=256):
        xs = self._inputs(x)
        labels = np.asarray(labels)
        n = len(labels)
        total = 0.0
        for s in range(0, n, batch_size):
            chunk = [a[s:s + batch_size] for a in xs]
            logits = self.forward(chunk if len(chunk) > 1 else chunk[0], train=False)
            loss, _, _ = softmax_cross_entropy(logits, one_hot(labels[s:s + batch_size], 2, self.dtype))
            total += loss * len(chunk[0])
        return total / n

    def state(self):
        """Copies of all parameters and buffers keyed by name."""
        st = {n: layer.params[k].copy() for n, layer, k in self.named_params()}
        st.update({n: layer.buffers[k].copy() for n, layer, k in self.named_buffers()})
        return st

    def load_state(self, state):
        for n, layer, k in self.named_params():
            layer.params[k][...] = state[n]
        for n, layer, k in self.named_buffers():
            layer.buffers[k][...] = state[n]


def build_dual_cnn(single_a, single_b, seed: int = 0, hidden: int = 128, dtype=np.float32) -> Network:
    """Dual-input network whose branches start from two trained single-input
    models (conv and batchnorm parameters and running statistics copied);
    the fusion layers are freshly initialised."""
    from .checkpoint import ModelCheckpoint

    specs = []
    for s in (single_a, single_b):
        spec = s.spec if isinstance(s, (Network, ModelCheckpoint)) else s
        if spec.kind != "single":
            raise ValueError("dual networks are built from two single-input models")
        specs.append(spec)
    if specs[0].input_shape != specs[1].input_shape or specs[0].branch != specs[1].branch:
        raise ValueError(
            f"incompatible branches: {specs[0].input_shape} vs {specs[1].input_shape}"
        )
    K, B = specs[0].input_shape
    head = _fusion_head(branch_output_size(specs[0].branch, (K, B)), hidden)
    dual = Network(ModelSpec("dual", (K, B), specs[0].branch, head), seed=seed, dtype=dtype)
    for i, src in enumerate((single_a, single_b)):
        state = src.state() if isinstance(src, Network) else src.state
        for j, layer in enumerate(dual.branches[i]):
            for k in layer.params:
                layer.params[k][...] = state[f"branch0.{j}.{k}"]
            for k in layer.buffers:
                layer.buffers[k][...] = state[f"branch0.{j}.{k}"]
    return dual
