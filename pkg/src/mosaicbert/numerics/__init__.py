"""Numeric substrate: tensors, tape autodiff, bf16 emulation, counters."""
from .bf16 import bf16_round, bf16_round_like, is_bf16_exact
from .counters import MultiplyCounter, op_scope
from .functional import cross_entropy, dropout, gelu, mse_loss, softmax, softmax_stable
from .gradcheck import grad_check
from .tensor import (
    DType,
    Tape,
    Tensor,
    add,
    as_tensor,
    concat,
    current_tape,
    div,
    exp,
    gather_rows,
    getitem,
    log,
    make_op,
    matmul,
    mean,
    mul,
    reshape,
    scatter_rows,
    sub,
    transpose,
    tsum,
    unbroadcast,
)

__all__ = [
    "DType", "Tape", "Tensor", "MultiplyCounter", "op_scope",
    "add", "as_tensor", "bf16_round", "bf16_round_like", "concat", "cross_entropy",
    "current_tape", "div", "dropout", "exp", "gather_rows", "gelu", "getitem",
    "grad_check", "is_bf16_exact", "log", "make_op", "matmul", "mean", "mse_loss",
    "mul", "reshape", "scatter_rows", "softmax", "softmax_stable", "sub", "transpose",
    "tsum", "unbroadcast",
]
