from . import tensor as T
from .checkpoint import CheckpointError, load, save
from .nn import MLP, Linear, Module, MultiHeadAttention, Parameter, mlp_forward, multi_head_attention
from .optim import Adam, MissingGradientError, adam_step
from .tensor import ShapeError, Tensor

__all__ = [
    "T", "Tensor", "ShapeError", "Parameter", "Module", "Linear", "MLP", "MultiHeadAttention",
    "mlp_forward", "multi_head_attention", "Adam", "adam_step", "MissingGradientError",
    "save", "load", "CheckpointError",
]
