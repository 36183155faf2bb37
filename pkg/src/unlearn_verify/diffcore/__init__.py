"""Differentiable classifier kernel: data, models, derivative oracles, training."""

from .data import Dataset, LabeledExample, make_blobs, make_rings
from .models import Model, ModelSpec, load_checkpoint, save_checkpoint
from .training import ConvergenceError, TrainConfig, TrainingDivergedError, train

__all__ = [
    "ConvergenceError",
    "Dataset",
    "LabeledExample",
    "Model",
    "ModelSpec",
    "TrainConfig",
    "TrainingDivergedError",
    "load_checkpoint",
    "make_blobs",
    "make_rings",
    "save_checkpoint",
    "train",
]
