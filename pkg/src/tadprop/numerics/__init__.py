from .checkpoint import CheckpointFormatError, assign_params, load_params, save_params
from .gradcheck import NumericError, grad_check
from .nn import (MLP, Conv1d, LayerNorm, Linear, Module, conv1d_same, layer_norm,
                 linear_forward, sinusoidal_table, softmax_stable)
from .optim import AdamW, ConfigError, adamw_step
from .tensor import DimensionError, Parameter, Tensor

__all__ = [
    "AdamW", "CheckpointFormatError", "ConfigError", "Conv1d", "DimensionError", "LayerNorm",
    "Linear", "MLP", "Module", "NumericError", "Parameter", "Tensor", "adamw_step",
    "assign_params", "conv1d_same", "grad_check", "layer_norm", "linear_forward",
    "load_params", "save_params", "sinusoidal_table", "softmax_stable",
]
