"""Learned photometric normalization and label distillation for breast-density grading."""

from .autodiff import NonFiniteError, ParameterStore, Tensor, grad_check
from .classifier import ClassifierConfig, DensityModel, TrainingDivergence
from .distillation import DistillConfig, run_distillation, run_hard_label
from .estimators import DensityClassifier, LabelDistiller, PhotometricNormalizer
from .ptn import IntensityWindow, PtnConfig, apply_h, hinge_regularizer, normalization_spread

__version__ = "0.1.0"

__all__ = [
    "ClassifierConfig", "DensityClassifier", "DensityModel", "DistillConfig", "IntensityWindow",
    "LabelDistiller", "NonFiniteError", "ParameterStore", "PhotometricNormalizer", "PtnConfig",
    "Tensor", "TrainingDivergence", "apply_h", "grad_check", "hinge_regularizer",
    "normalization_spread", "run_distillation", "run_hard_label",
]
