"""Deep component analysis: multilayer constrained reconstruction models
with ADMM inference unrolled into trainable networks."""

from .admm import infer
from .learning import Dataset, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .linop import Conv2dOperator, DenseOperator
from .model import InferenceState, Layer, Model, model_from_config, model_to_config, objective
from .prox import PenaltySpec, prox
from .tensor import DimensionError, FormatError, load_dcat, save_dcat

__version__ = "0.1.0"

__all__ = [
    "infer",
    "Dataset",
    "TrainConfig",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "DenseOperator",
    "Conv2dOperator",
    "Layer",
    "Model",
    "InferenceState",
    "objective",
    "model_from_config",
    "model_to_config",
    "PenaltySpec",
    "prox",
    "DimensionError",
    "FormatError",
    "load_dcat",
    "save_dcat",
]
