"""Testbed for machine-unlearning verification under honest and adversarial providers."""

__version__ = "0.1.0"

from .diffcore import (
    Dataset,
    LabeledExample,
    Model,
    ModelSpec,
    TrainConfig,
    make_blobs,
    make_rings,
    train,
)

__all__ = [
    "Dataset",
    "LabeledExample",
    "Model",
    "ModelSpec",
    "TrainConfig",
    "make_blobs",
    "make_rings",
    "train",
    "__version__",
]
