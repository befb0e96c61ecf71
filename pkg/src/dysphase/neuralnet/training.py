"""Vanilla SGD, the dev-loss plateau learning-rate schedule and the
training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import EpochRecord, ModelCheckpoint
from .network import Network

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 0.01
    lr_halving_patience: int = 5
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "lr_halving_patience", "lr_factor", "min_lr", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def sgd_update(params, grads, lr):
    """In-place ``w <- w - lr * g`` for matching sequences of arrays."""
    for w, g in zip(params, grads):
        w -= w.dtype.type(lr) * g
    return params


class PlateauHalving:
    """Halve the learning rate once the dev loss has failed to improve on
    its best value for ``patience`` consecutive epochs.

    The reference value is the dev loss of the untrained model, so a flat
    loss curve halves at epochs 5, 10, 15, ...
    """

    def __init__(self, lr=0.01, patience=5, factor=0.5, min_lr=1e-6):
        self.lr, self.patience, self.factor, self.min_lr = lr, patience, factor, min_lr
        self.best = float("inf")
        self.bad_epochs = 0

    def start(self, initial_loss):
        self.best = float(initial_loss)
        self.bad_epochs = 0

    def step(self, dev_loss):
        if dev_loss < self.best:
            self.best = float(dev_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr

    @property
    def exhausted(self):
        return self.lr < self.min_lr


def update_lr(dev_losses, initial_lr=0.01, patience=5, factor=0.5):
    """Learning rate after replaying ``dev_losses`` (index 0 = untrained model)."""
    sched = PlateauHalving(initial_lr, patience, factor)
    sched.start(dev_losses[0])
    for loss in dev_losses[1:]:
        sched.step(loss)
    return sched.lr


def _take(x, idx):
    if isinstance(x, (tuple, list)):
        return [a[idx] for a in x]
    return x[idx]


def _length(x):
    return len(x[0]) if isinstance(x, (tuple, list)) else len(x)


def fit(net: Network, train_x, train_y, dev_x, dev_y, config: TrainConfig = TrainConfig(),
        progress=None) -> ModelCheckpoint:
    """Train ``net`` in place and return the final-epoch checkpoint.

    ``train_x``/``dev_x`` are ``(N, K, B)`` arrays, or pairs of them for
    dual-input networks. Runs single-threaded so results are reproducible
    bit for bit.
    """
    n_train, n_dev = _length(train_x), _length(dev_x)
    if n_train == 0 or n_dev == 0:
        raise TrainingError("training and development sets must both be non-empty")
    train_y = np.asarray(train_y)
    dev_y = np.asarray(dev_y)
    shuffle_rng = np.random.default_rng([config.seed, 0x5EED])
    sched = PlateauHalving(config.initial_lr, config.lr_halving_patience, config.lr_factor, config.min_lr)
    history: list[EpochRecord] = []
    params = [layer.params[k] for _, layer, k in net.named_params()]
    with threadpool_limits(limits=1):
        sched.start(net.evaluate_loss(dev_x, dev_y))
        epoch = 0
        while epoch < config.max_epochs and not sched.exhausted:
            epoch += 1
            order = shuffle_rng.permutation(n_train)
            batches = [order[s:s + config.batch_size] for s in range(0, n_train, config.batch_size)]
            if len(batches) > 1 and len(batches[-1]) == 1:
                batches.pop()  # batchnorm cannot train on a single sample
            total, seen = 0.0, 0
            for idx in batches:
                net.zero_grad()
                loss, _ = net.loss_and_grad(_take(train_x, idx), train_y[idx], train=True)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite training loss at epoch {epoch}")
                grads = [layer.grads[k] for _, layer, k in net.named_params()]
                sgd_update(params, grads, sched.lr)
                total += loss * len(idx)
                seen += len(idx)
            dev_loss = net.evaluate_loss(dev_x, dev_y)
            if not np.isfinite(dev_loss):
                raise TrainingError(f"non-finite development loss at epoch {epoch}")
            lr_used = sched.lr
            sched.step(dev_loss)
            history.append(EpochRecord(epoch, total / seen, dev_loss, lr_used))
            log.debug("epoch %d train %.4f dev %.4f lr %.3g", epoch, total / seen, dev_loss, lr_used)
            if progress is not None:
                progress(history[-1])
    return ModelCheckpoint.from_network(
        net, lr=sched.lr, best_dev_loss=sched.best, bad_epochs=sched.bad_epochs,
        epoch=epoch, history=history,
    )
