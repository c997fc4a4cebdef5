"""Minimal reverse-mode autodiff over numpy arrays."""
from .tensor import (OPS, ContractError, NumericError, ShapeError, Tape, Tensor, apply,
                     backward, grad_enabled, no_grad)
from .ops import (OP_KINDS, add, batch_norm_2d, bce_with_logits, concat, conv2d, dropout,
                  global_avg_pool_2d, layer_norm, linear, matmul, mean, relu, relu6,
                  reshape, scale, sigmoid, slice_, softmax, transpose)
from .gradcheck import CheckReport, check_function, grad_check, grad_check_suite

__all__ = [
    "OPS", "OP_KINDS", "ContractError", "NumericError", "ShapeError", "Tape", "Tensor",
    "apply", "backward", "grad_enabled", "no_grad", "add", "batch_norm_2d",
    "bce_with_logits", "concat", "conv2d", "dropout", "global_avg_pool_2d", "layer_norm",
    "linear", "matmul", "mean", "relu", "relu6", "reshape", "scale", "sigmoid", "slice_",
    "softmax", "transpose", "CheckReport", "check_function", "grad_check", "grad_check_suite",
]
