"""Adapter-based multi-task vision-language training lab on a synthetic fashion corpus."""

from .autodiff import Tape, Tensor, backward, grad_check
from .model import ModelConfig, VLModel
from .training import TrainConfig, train_mtl, train_teacher

__all__ = ["Tape", "Tensor", "backward", "grad_check",
           "ModelConfig", "VLModel", "TrainConfig", "train_mtl", "train_teacher"]

__version__ = "0.1.0"
