"""Tensor engine, neural primitives and optimization."""

from .tensor import Tape, Tensor, add, as_tensor, elu1, matmul, mul, relu, scale, set_debug, spmm, total
from .functional import (
    attention_weights,
    cross_entropy,
    dropout,
    layernorm_noaffine,
    linear,
    linear_attention,
    masked_softmax_attention,
    mlp2,
    sparse_signed_apply,
)
from .optim import Adam, adam_step, cosine_lr
from .checkpoint import CheckpointError, load_arrays, save_arrays

__all__ = [
    "Tape", "Tensor", "add", "as_tensor", "elu1", "matmul", "mul", "relu", "scale", "set_debug",
    "spmm", "total", "attention_weights", "cross_entropy", "dropout", "layernorm_noaffine", "linear",
    "linear_attention", "masked_softmax_attention", "mlp2", "sparse_signed_apply", "Adam",
    "adam_step", "cosine_lr", "CheckpointError", "load_arrays", "save_arrays",
]
