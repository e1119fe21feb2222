"""Deep Transformer lab: depth-scaled init, merged attention, gradient probes."""
from .model import ModelConfig, Transformer, build, count_params
from .numcore import Rng, Tape, Tensor, backward, grad_check
from .tasks import SyntheticTask

__all__ = [
    "ModelConfig", "Rng", "SyntheticTask", "Tape", "Tensor", "Transformer",
    "backward", "build", "count_params", "grad_check",
]
