"""Sharpness-aware minimization with per-batch, per-instance and reweighted perturbations."""

from .autodiff import Tape, Tensor, backward
from .models import Batch, MlpSpec, QuadraticModel, PassCounter
from .params import Layout, ParamVector
from .perturbation import PerturbConfig, ZeroGradient
from .rng import Rng, gaussian_vector

__version__ = "0.1.0"

__all__ = [
    "Batch", "Layout", "MlpSpec", "ParamVector", "PassCounter", "PerturbConfig",
    "QuadraticModel", "Rng", "Tape", "Tensor", "ZeroGradient", "backward",
    "gaussian_vector",
]
