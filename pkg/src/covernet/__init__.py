"""From-scratch convolutional networks for book-cover genre classification."""

from .net import build_alexnet30, build_lenet_variant, forward, replace_head, train_step
from .optim import LrSchedule, lr_at

__version__ = "0.1.0"

__all__ = [
    "build_alexnet30",
    "build_lenet_variant",
    "forward",
    "replace_head",
    "train_step",
    "LrSchedule",
    "lr_at",
]
