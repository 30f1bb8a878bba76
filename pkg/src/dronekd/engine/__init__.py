from .tensor import (
    DEFAULT_DTYPE,
    OpGraph,
    Tensor,
    abs_,
    add,
    avg_pool2d,
    channel_shuffle,
    concat,
    conv2d,
    div,
    exp,
    gather,
    linear,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    maximum,
    mean,
    minimum,
    mul,
    narrow,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    split,
    sqrt,
    sub,
    sum_,
    take,
    transpose,
    upsample2x,
    where,
)
from .nn import SGD, Conv2d, Linear, Module
from .flops import FlopReport, conv_out_hw, count_flops, fpn_level_shapes
from .gradcheck import GradCheckReport, check_gradients, gradcheck, numeric_gradient, registered_ops
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "DEFAULT_DTYPE", "OpGraph", "Tensor", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs_",
    "relu", "sigmoid", "softplus", "maximum", "minimum", "where",
    "sum_", "mean", "reshape", "transpose", "concat", "narrow", "split",
    "take", "gather", "matmul", "linear", "softmax", "log_softmax",
    "conv2d", "max_pool2d", "avg_pool2d", "upsample2x", "channel_shuffle",
    "Module", "Conv2d", "Linear", "SGD",
    "FlopReport", "count_flops", "conv_out_hw", "fpn_level_shapes",
    "GradCheckReport", "check_gradients", "gradcheck", "numeric_gradient", "registered_ops",
    "save_checkpoint", "load_checkpoint",
]
