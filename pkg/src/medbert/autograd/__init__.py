"""Minimal reverse-mode autodiff: tensors, NN ops, AdamW, gradient checks."""
from .checkpoint import load_checkpoint, loads_checkpoint, dumps_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import (
    MASK_VALUE,
    binary_cross_entropy_logit,
    cross_entropy_logits,
    dropout,
    embedding,
    layer_norm,
    softmax,
)
from .optim import ParameterStore, adamw_step, truncated_normal
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    exp,
    gelu,
    getitem,
    log,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    sum_,
    tanh,
    transpose,
)

embedding_lookup = embedding

__all__ = [
    "GradCheckReport", "MASK_VALUE", "ParameterStore", "Tape", "Tensor", "add", "adamw_step",
    "backward", "binary_cross_entropy_logit", "concat", "cross_entropy_logits", "dropout",
    "dumps_checkpoint", "embedding", "embedding_lookup", "exp", "gelu", "getitem", "grad_check",
    "layer_norm", "load_checkpoint", "loads_checkpoint", "log", "matmul", "mean", "mul", "relative_error",
    "relu", "reshape", "save_checkpoint", "sigmoid", "softmax", "stack", "sum_", "tanh",
    "transpose", "truncated_normal",
]
