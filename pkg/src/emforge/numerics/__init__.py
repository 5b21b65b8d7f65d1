"""Dense tensors with reverse-mode differentiation."""

from . import ops
from .ops import (
    add,
    concat,
    div,
    embedding,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    ordered_matmul,
    reshape,
    softmax,
    stop_gradient,
    sub,
    sum,
    take,
    tanh,
    transpose,
)
from .tape import GradTape, TapeStats, active_tape, grad, record, tape_stats
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    check_finite,
    load_tensor,
    read_tensor,
    save_tensor,
    write_tensor,
)

__all__ = [
    "GradTape", "NonFiniteError", "TapeStats", "Tensor", "active_tape", "add", "as_tensor",
    "check_finite", "concat", "div", "embedding", "exp", "gelu", "grad", "l2_normalize",
    "layer_norm", "load_tensor", "log", "logsumexp", "matmul", "mean", "mul", "neg", "ops",
    "ordered_matmul", "read_tensor", "record", "reshape", "save_tensor", "softmax", "stop_gradient", "sub",
    "sum", "take", "tanh", "tape_stats", "transpose", "write_tensor",
]
