from .gradcheck import GradCheckError, directional_check, grad_check, grad_check_params
from .layers import (
    AttentionParams,
    ConfigurationError,
    conv2d,
    dropout,
    layer_norm,
    linear_forward,
    log_softmax,
    max_pool2d,
    multi_head_attention,
    softmax,
)
from .optim import AdamState, NonFiniteGradientError, OptimConfig, adam_step
from .tensor import DimensionError, Tensor, as_tensor, concat, stack

__all__ = [
    "AdamState", "AttentionParams", "ConfigurationError", "DimensionError", "GradCheckError",
    "NonFiniteGradientError", "OptimConfig", "Tensor", "adam_step", "as_tensor", "concat",
    "conv2d", "directional_check", "dropout", "grad_check", "grad_check_params", "layer_norm",
    "linear_forward", "log_softmax", "max_pool2d", "multi_head_attention", "softmax", "stack",
]
