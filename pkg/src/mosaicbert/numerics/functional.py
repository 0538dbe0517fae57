"""Differentiable nonlinearities and losses with explicit backward rules."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import DegenerateSliceError
from .tensor import Tensor, as_tensor, make_op, result_dtype

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_stable(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with the per-slice max subtracted first.

    ``-inf`` entries mark masked positions and map to exactly 0.  A slice with
    no finite entry raises DegenerateSliceError.
    """
    x = as_tensor(x)
    xd = x.data
    mx = np.max(xd, axis=axis, keepdims=True)
    if np.any(np.isneginf(mx)):
        raise DegenerateSliceError("softmax slice has no finite entry (fully masked)")
    e = np.exp(xd - mx)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), backward, result_dtype(x.dtype), "softmax")


softmax = softmax_stable


def gelu(x) -> Tensor:
    """Exact GeLU, x * Phi(x), with Phi the erf-based normal CDF."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_op(out, (x,), backward, result_dtype(x.dtype), "gelu")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), x.dtype, "dropout")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = -100) -> Tensor:
    """Mean token cross-entropy over positions whose label is not ``ignore_index``.

    ``logits`` is [..., V]; ``labels`` matches the leading shape.  With no
    labelled position the loss is 0 and so is its gradient.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    lab = np.asarray(labels).reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ValueError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    keep = lab != ignore_index
    n = int(keep.sum())
    mx = flat.max(axis=1, keepdims=True)
    shifted = flat - mx
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    safe = np.where(keep, lab, 0)
    picked = logp[np.arange(flat.shape[0]), safe]
    loss = -(picked * keep).sum() / max(n, 1)

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(flat.shape[0]), safe] -= 1.0
        grad *= (keep / max(n, 1))[:, None]
        return ((g * grad).reshape(logits.shape),)

    return make_op(np.asarray(loss), (logits,), backward, result_dtype(logits.dtype), "cross_entropy")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - target
    loss = np.asarray((diff * diff).mean())

    def backward(g):
        return (g * 2.0 * diff / diff.size,)

    return make_op(loss, (pred,), backward, result_dtype(pred.dtype), "mse")
