"""Minimal dense tensor library with reverse-mode autodiff."""

from . import functional
from .checkpoint import load as load_checkpoint
from .checkpoint import save as save_checkpoint
from .core import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    exp,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    pad2d,
    relu,
    reshape,
    roll,
    set_default_dtype,
    stack,
    sub,
    transpose,
    tsum,
)
from .functional import (
    batch_norm,
    conv2d,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    resize_bilinear,
    softmax,
    upsample2x,
)
from .gradcheck import gradcheck, numerical_gradient, relative_error
from .optim import SGD, LrSchedule, OptimState, lr_at, sgd_step

__all__ = [
    "Parameter",
    "Tensor",
    "SGD",
    "LrSchedule",
    "OptimState",
    "add",
    "as_tensor",
    "batch_norm",
    "concat",
    "conv2d",
    "default_dtype",
    "exp",
    "functional",
    "gelu",
    "get_default_dtype",
    "getitem",
    "gradcheck",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log",
    "log_softmax",
    "lr_at",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numerical_gradient",
    "pad",
    "pad2d",
    "relative_error",
    "relu",
    "reshape",
    "resize_bilinear",
    "roll",
    "save_checkpoint",
    "set_default_dtype",
    "sgd_step",
    "softmax",
    "stack",
    "sub",
    "transpose",
    "tsum",
    "upsample2x",
]
