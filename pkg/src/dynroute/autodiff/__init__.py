from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    avg_pool_to,
    bilinear_upsample_2x,
    conv2d_1x1,
    depthwise_separable_conv3x3,
    fully_connected,
    global_avg_pool,
)
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    clamp,
    concat,
    cosine_similarity,
    div,
    exp,
    log_sigmoid,
    max_over_vector,
    mean,
    minimum,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    sub,
    sum_axis,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "GradCheckReport",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "avg_pool_to",
    "bilinear_upsample_2x",
    "clamp",
    "concat",
    "conv2d_1x1",
    "cosine_similarity",
    "depthwise_separable_conv3x3",
    "div",
    "exp",
    "fully_connected",
    "global_avg_pool",
    "grad_check",
    "load_checkpoint",
    "log_sigmoid",
    "max_over_vector",
    "mean",
    "minimum",
    "mul",
    "neg",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "sqrt",
    "square",
    "sub",
    "sum_axis",
    "take",
    "tanh",
    "transpose",
    "tsum",
]
