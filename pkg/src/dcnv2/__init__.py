"""Deep & cross network (DCN-V2) layers, training loop and polynomial oracle."""

from .core import KERNEL_BACKEND, Rng, ShapeError, hadamard, matmul, matvec, singular_values
from .layers import (
    Activation,
    CrossLayer,
    DCNv1CrossLayer,
    DenseLayer,
    EmbeddingLayer,
    GateMode,
    LowRankCrossLayer,
    MixtureCrossLayer,
    ParamTensor,
)
from .model import Architecture, Batch, CrossSpec, Model, Structure, Task
from .optim import Trainer, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "Activation",
    "Architecture",
    "Batch",
    "CrossLayer",
    "CrossSpec",
    "DCNv1CrossLayer",
    "DenseLayer",
    "EmbeddingLayer",
    "GateMode",
    "LowRankCrossLayer",
    "MixtureCrossLayer",
    "Model",
    "ParamTensor",
    "Rng",
    "ShapeError",
    "Structure",
    "Task",
    "TrainConfig",
    "Trainer",
    "hadamard",
    "matmul",
    "matvec",
    "singular_values",
    "train",
]
