from .functional import conv1d, conv_output_length, cross_entropy, l1_loss, linear
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import (GraphError, Tensor, absolute, add, concat, div, exp, getitem, log, log_softmax,
                     matmul, mean, mul, no_grad, parameter, relu, reshape, sigmoid, softmax, sub, transpose,
                     tsum, zero_grad)

__all__ = [
    "Adam", "AdamState", "GradCheckReport", "GraphError", "Tensor", "absolute", "adam_step", "add",
    "concat", "conv1d", "conv_output_length", "cross_entropy", "div", "exp", "getitem", "grad_check",
    "l1_loss", "linear", "log", "log_softmax", "matmul", "mean", "mul", "no_grad", "parameter", "relu", "reshape",
    "sigmoid", "softmax", "sub", "transpose", "tsum", "zero_grad",
]
