"""Finite-difference verification of backward rules."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import EvaluationError
from .tensor import DType, Tape, Tensor


def _as_list(x) -> list[Tensor]:
    return [x] if isinstance(x, Tensor) else list(x)


def _scalar(f, xs) -> float:
    out = f(*xs)
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out, dtype=np.float64).sum())
    if not np.isfinite(val):
        raise EvaluationError(f"function under check returned non-finite value {val}")
    return val


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    surrogate: Callable[..., Tensor] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with the tensors in ``x`` as positional arguments and must
    return a scalar.  Everything is evaluated on F64 copies of the inputs.
    The error per coordinate is |analytic - fd| / max(1, |fd|).

    ``surrogate`` replaces ``f`` for the finite differences only.  It exists
    for quantizing forwards (bf16 modes) whose backward is straight-through:
    the surrogate is the same computation without the rounding.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xs = [Tensor(t.data, dtype=DType.F64, requires_grad=True) for t in _as_list(x)]
    with Tape() as tape:
        out = f(*xs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check needs f to return a scalar Tensor")
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("function under check returned a non-finite value")
    if out.requires_grad:
        tape.backward(out)
    fd_fn = surrogate or f
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _scalar(fd_fn, xs)
            flat[i] = orig - eps
            lo = _scalar(fd_fn, xs)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
