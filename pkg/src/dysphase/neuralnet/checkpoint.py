"""Binary model checkpoints ("PDNN" format)."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ModelSpec, Network

MAGIC = b"PDNN"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    lr: float


@dataclass
class ModelCheckpoint:
    spec: ModelSpec
    state: dict  # name -> float32 array; parameters first, then buffers
    param_names: list
    buffer_names: list
    lr: float = 0.01
    best_dev_loss: float = float("inf")
    bad_epochs: int = 0
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def from_network(cls, net: Network, **kw) -> "ModelCheckpoint":
        pn = [n for n, _, _ in net.named_params()]
        bn = [n for n, _, _ in net.named_buffers()]
        state = {k: v.astype(np.float32) for k, v in net.state().items()}
        return cls(net.spec, state, pn, bn, seed=net.seed, **kw)

    def to_network(self, dtype=np.float32) -> Network:
        net = Network(self.spec, seed=self.seed, dtype=dtype)
        net.load_state(self.state)
        return net


def _pstr(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _parray(name: str, a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = _pstr(name) + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def encode(ck: ModelCheckpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    descs = ck.spec.descriptors()
    parts.append(struct.pack("<I", len(descs)))
    for d in descs:
        parts.append(_pstr(json.dumps(d, sort_keys=True, separators=(",", ":"))))
    for names in (ck.param_names, ck.buffer_names):
        parts.append(struct.pack("<I", len(names)))
        parts.extend(_parray(n, ck.state[n]) for n in names)
    parts.append(struct.pack("<ddIIq", ck.lr, ck.best_dev_loss, ck.bad_epochs, ck.epoch, ck.seed))
    parts.append(struct.pack("<I", len(ck.history)))
    for h in ck.history:
        parts.append(struct.pack("<Iddd", h.epoch, h.train_loss, h.dev_loss, h.lr))
    return b"".join(parts)


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self):
        name = self.string()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        a = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return name, a


def decode(data: bytes, path="<bytes>") -> ModelCheckpoint:
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a model checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    (nd,) = r.unpack("<I")
    spec = ModelSpec.from_descriptors([json.loads(r.string()) for _ in range(nd)])
    state, groups = {}, []
    for _ in range(2):
        (n,) = r.unpack("<I")
        names = []
        for _ in range(n):
            name, a = r.array()
            state[name] = a
            names.append(name)
        groups.append(names)
    lr, best, bad, epoch, seed = r.unpack("<ddIIq")
    (nh,) = r.unpack("<I")
    history = [EpochRecord(*r.unpack("<Iddd")) for _ in range(nh)]
    if r.pos != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes after checkpoint")
    return ModelCheckpoint(spec, state, groups[0], groups[1], lr, best, bad, epoch, seed, history)


def save(ck: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> ModelCheckpoint:
    path = Path(path)
    return decode(path.read_bytes(), path)
