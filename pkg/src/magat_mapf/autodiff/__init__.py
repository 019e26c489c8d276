"""Dense float64 tensor kernel with reverse-mode differentiation.

Tensors and the tape are torch's; this package fixes the dtype, adds shape
validation, the masked softmax convention, Adam with cosine annealing, a
finite-difference checker and the checkpoint container.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, finite_difference_check
from .ops import (
    DTYPE,
    BackwardError,
    ShapeError,
    add,
    backward,
    group_norm,
    concat,
    conv2d,
    cross_entropy,
    leaky_relu,
    masked_softmax,
    matmul,
    max_pool,
    mul,
    relu,
    tensor,
)
from .optim import Adam, OptimizerState, cosine_lr

__all__ = [
    "DTYPE", "BackwardError", "ShapeError", "add", "backward", "group_norm", "concat", "conv2d",
    "cross_entropy", "leaky_relu", "masked_softmax", "matmul", "max_pool", "mul", "relu", "tensor",
    "Adam", "OptimizerState", "cosine_lr", "GradCheckResult", "finite_difference_check",
    "load_checkpoint", "save_checkpoint",
]
