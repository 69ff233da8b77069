"""Cheap convolutions, exact cost accounting and online distillation on a small numpy autodiff core."""
__version__ = "0.1.0"

from .cost import CostReport, LayerCost, layer_cost, network_cost, rate
from .distill import LossConfig
from .graph import ArchDescriptor, ArchError, load_arch, parse_arch, preset, serialize, substitute_conv
from .kernels import BACKEND
from .model import TeacherHead, instantiate
from .tensor import Parameter, ShapeError, Tensor, no_grad
from .train import TrainConfig, evaluate, lr_at_epoch, select_best_student, sgd_step, train

__all__ = [
    "ArchDescriptor", "ArchError", "BACKEND", "CostReport", "LayerCost", "LossConfig", "Parameter",
    "ShapeError", "TeacherHead", "Tensor", "TrainConfig", "evaluate", "instantiate", "layer_cost",
    "load_arch", "lr_at_epoch", "network_cost", "no_grad", "parse_arch", "preset", "rate",
    "select_best_student", "serialize", "sgd_step", "substitute_conv", "train",
]
