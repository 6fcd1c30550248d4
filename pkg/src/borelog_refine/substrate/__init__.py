"""Deterministic differentiable-computation layer: tensors, layers, Adam."""

from .gradcheck import gradient_check
from .nn import (conv1d, conv2d, conv_transpose2d, dense, group_norm,
                 layer_norm, softmax_cross_entropy)
from .optim import OptimizerState, adam_step
from .params import ParameterStore, stream_seed
from .tensor import (DTYPE, SubstrateError, Tensor, add, arctanh, backward,
                     check_finite, concat, constant, exp, log, matmul, mul,
                     relu, reshape, sigmoid, softmax, square, take, tanh,
                     tmean, transpose, tsum)

__all__ = [
    "DTYPE", "SubstrateError", "Tensor", "ParameterStore", "OptimizerState",
    "adam_step", "gradient_check", "add", "mul", "square", "exp", "log",
    "relu", "sigmoid", "tanh", "arctanh", "tsum", "tmean", "reshape",
    "transpose", "concat", "take", "matmul", "softmax", "backward",
    "constant", "check_finite", "conv1d", "conv2d", "conv_transpose2d",
    "dense", "layer_norm", "group_norm", "softmax_cross_entropy", "stream_seed",
]
