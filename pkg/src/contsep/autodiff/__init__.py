from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import SGD, Adam
from .tensor import (
    Tensor, add, as_tensor, concat, div, elementwise, exp, getitem, l2_normalize, log,
    log_softmax, logsumexp, matmul, maximum, mean, mul, neg, no_grad, ones, ones_like, power,
    randn, relu, reshape, sigmoid, softmax, sqrt, stack, sub, swapaxes, tabs, tanh, tensor,
    topological_order, transpose, tsum, zeros,
)

__all__ = [
    "Tensor", "SGD", "Adam", "add", "as_tensor", "concat", "div", "elementwise", "exp",
    "getitem", "gradcheck", "l2_normalize", "log", "log_softmax", "logsumexp", "matmul",
    "maximum", "mean", "mul", "neg", "no_grad", "numerical_grad", "ones", "ones_like", "power",
    "randn", "relative_error", "relu", "reshape", "sigmoid", "softmax", "sqrt", "stack", "sub",
    "swapaxes", "tabs", "tanh", "tensor", "topological_order", "transpose", "tsum", "zeros",
]
