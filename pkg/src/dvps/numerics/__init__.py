from .tensor import (
    GradTape,
    NumericError,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    tsum,
)
from .nn import conv1d_temporal, linear, mlp, multi_head_attention, norm
from .gradcheck import check_gradients

__all__ = [
    "GradTape", "NumericError", "Tensor", "add", "as_tensor", "backward", "concat", "exp",
    "getitem", "layer_norm", "log", "log_softmax", "matmul", "mean", "mul", "relu", "reshape",
    "sigmoid", "softmax", "softplus", "sqrt", "stack", "sub", "tsum", "conv1d_temporal",
    "linear", "mlp", "multi_head_attention", "norm", "check_gradients",
]
