from .gradcheck import GradCheckError, grad_check
from .optim import OptimizerState, adam_init, adam_step
from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    add,
    backward,
    concat,
    div,
    gelu,
    layer_norm,
    matmul,
    mul,
    observe_softmax,
    record,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_axis,
    softmax,
    sub,
    tabs,
    texp,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "GradCheckError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "active_tape",
    "adam_init",
    "adam_step",
    "add",
    "backward",
    "concat",
    "div",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mul",
    "observe_softmax",
    "record",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "slice_axis",
    "softmax",
    "sub",
    "tabs",
    "texp",
    "tmean",
    "transpose",
    "tsum",
]
