"""Hyperspectral pansharpening with feature-level attention, on plain numpy."""
from .errors import ContractError, DegenerateInputError, DimensionError, FormatError, NonFiniteError
from .losses import LossWeights, PerceptualNet, loss_overall
from .metrics import MetricsReport
from .model import HyperTransformerNet, ModelConfig, bicubic_baseline
from .pipeline import HsiCube, PanImage, Patch, synth_dataset, walds_degrade
from .tensor import Tensor, backward, no_grad
from .trainer import RunManifest, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DegenerateInputError", "DimensionError", "FormatError", "NonFiniteError",
    "LossWeights", "PerceptualNet", "loss_overall", "MetricsReport", "HyperTransformerNet",
    "ModelConfig", "bicubic_baseline", "HsiCube", "PanImage", "Patch", "synth_dataset",
    "walds_degrade", "Tensor", "backward", "no_grad", "RunManifest", "TrainConfig", "evaluate", "train",
]
