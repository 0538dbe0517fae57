"""Adam with fully decoupled weight decay.

The decay term is ``weight_decay * w`` per step, independent of the learning
rate schedule.  One-dimensional parameters (biases, LayerNorm gains and
shifts) are never decayed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError
from ..numerics import Tensor


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 1e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay, "t": self.t}


def decays(param: Tensor) -> bool:
    return param.ndim >= 2


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: OptimizerState,
               lr: float) -> OptimizerState:
    """One in-place update of ``params``.  ``grads`` defaults to each ``.grad``;
    parameters without a gradient are treated as having a zero gradient."""
    if grads is None:
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}", parameter=name)
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        w = p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(p):
            update = update + state.weight_decay * w
        w -= update.astype(w.dtype, copy=False)
    return state
