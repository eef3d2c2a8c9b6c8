from . import ops
from .checkpoint import CheckpointError
from .gradcheck import GradCheckReport, grad_check
from .layers import ConvLayer, TransposedConvLayer
from .optim import Adam, AdamState, StepDecay, adam_step
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "ConvLayer",
    "GradCheckReport",
    "NonFiniteError",
    "ShapeError",
    "StepDecay",
    "Tensor",
    "TransposedConvLayer",
    "adam_step",
    "grad_check",
    "no_grad",
    "ops",
]
