"""Minimal deterministic CNN engine: layers, the single- and dual-input
architectures, SGD training and gradient checking."""
from .checkpoint import EpochRecord, ModelCheckpoint, load, save
from .gradcheck import check_layer, finite_difference_check, relative_error
from .layers import (
    BatchNorm2D,
    Conv2D,
    Dropout,
    Flatten,
    Linear,
    MaxPool2D,
    ReLU,
    Softmax,
    one_hot,
    softmax,
    softmax_cross_entropy,
)
from .network import ModelSpec, Network, build_dual_cnn, build_single_cnn, dual_cnn_spec
from .training import PlateauHalving, TrainConfig, TrainingError, fit, sgd_update, update_lr

__all__ = [
    "BatchNorm2D", "Conv2D", "Dropout", "Flatten", "Linear", "MaxPool2D", "ReLU", "Softmax",
    "EpochRecord", "ModelCheckpoint", "ModelSpec", "Network", "PlateauHalving", "TrainConfig",
    "TrainingError", "build_dual_cnn", "build_single_cnn", "check_layer", "dual_cnn_spec",
    "finite_difference_check", "fit", "load", "one_hot", "relative_error", "save", "sgd_update", "softmax",
    "softmax_cross_entropy", "update_lr",
]
