"""Hand-written convolutional network kernels (numpy, float64, no autograd)."""

from coopsim.nn.layers import (
    BatchNorm,
    Conv2D,
    Layer,
    LeakyReLU,
    MaxPool2,
    ShapeError,
)
from coopsim.nn.network import (
    Network,
    backward_layers,
    build_network,
    load_checkpoint,
    load_network,
    run_layers,
    save_checkpoint,
    save_network,
)
from coopsim.nn.gradcheck import GradCheckReport, check_gradients

__all__ = [
    "BatchNorm",
    "Conv2D",
    "Layer",
    "LeakyReLU",
    "MaxPool2",
    "ShapeError",
    "Network",
    "backward_layers",
    "build_network",
    "load_checkpoint",
    "load_network",
    "run_layers",
    "save_checkpoint",
    "save_network",
    "GradCheckReport",
    "check_gradients",
]
