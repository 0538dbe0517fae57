"""Multi-head self-attention with linear distance biases.

Three interchangeable execution paths share one set of weights:

* ``mhsa_naive``    materializes the full L x L score matrix per head.
* ``mhsa_tiled``    streams over key blocks with an online softmax (running
                    max, running denominator, rescaled numerator) and never
                    holds more than L x key_block scores per head.  Its
                    backward recomputes scores block by block from the saved
                    log-sum-exp instead of storing probabilities.
* ``mhsa_unpadded`` runs on a packed token stream and attends within each
                    cu_seqlens segment only.

Scores are scaled by 1/sqrt(head_dim) and the bias is added afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .alibi import AlibiSlopes, bias_for_slopes, distance_matrix
from .errors import ConfigError, DegenerateSliceError, DimensionError
from .numerics import Tensor, concat, dropout, make_op, matmul, op_scope, softmax_stable
from .numerics.tensor import result_dtype
from .unpad import PackedBatch, validate_cu_seqlens


@dataclass
class AttentionWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class TileStats:
    """Instrumentation for the tiled path (per (batch, head) slice)."""

    peak_score_elements: int = 0
    peak_score_bytes: int = 0
    blocks: int = 0
    block_shapes: list = field(default_factory=list)

    def observe(self, scores: np.ndarray) -> None:
        per_head = scores.shape[-2] * scores.shape[-1]
        self.peak_score_elements = max(self.peak_score_elements, per_head)
        self.peak_score_bytes = max(self.peak_score_bytes, per_head * scores.itemsize)
        self.blocks += 1


def _slopes_array(slopes, n_heads: int) -> np.ndarray:
    s = slopes.as_array() if isinstance(slopes, AlibiSlopes) else np.asarray(slopes, dtype=np.float64)
    if s.shape != (n_heads,):
        raise ConfigError(f"expected {n_heads} slopes, got {s.shape}")
    return s


def _check_mask(mask, b: int, l: int) -> np.ndarray:
    if mask is None:
        return np.ones((b, l), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (b, l):
        raise DimensionError(f"mask shape {mask.shape} does not match batch ({b}, {l})")
    if not np.all(mask.any(axis=1)):
        raise DegenerateSliceError("a sequence has every key masked")
    return mask


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, L, H] -> [B, heads, L, d]"""
    b, l, h = x.shape
    return x.reshape(b, l, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, nh, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, nh * d)


def _project(x: Tensor, w: AttentionWeights):
    if x.shape[-1] != w.hidden:
        raise DimensionError(f"input width {x.shape[-1]} != attention hidden {w.hidden}")
    q = split_heads(_linear(x, w.wq, w.bq), w.n_heads)
    k = split_heads(_linear(x, w.wk, w.bk), w.n_heads)
    v = split_heads(_linear(x, w.wv, w.bv), w.n_heads)
    return q, k, v


# -- cores: [B, heads, L, d] in, [B, heads, L, d] out --------------------

def attention_core_naive(q, k, v, slopes, mask=None, *, dropout_p: float = 0.0, rng=None, training: bool = False):
    b, nh, l, d = q.shape
    mask = _check_mask(mask, b, l)
    store = q.data.dtype
    _slopes_array(slopes, nh)
    bias = bias_for_slopes(l, slopes).astype(store)
    key_bias = np.where(mask, 0.0, -np.inf).astype(store)[:, None, None, :]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    scores = scores + (bias[None] + key_bias)
    probs = softmax_stable(scores, axis=-1)
    probs = dropout(probs, dropout_p, rng, training)
    return matmul(probs, v)


def _block_scores(qd, kd, slopes, key_bias, pos_q, j0, j1, scale):
    s = (qd @ np.swapaxes(kd[..., j0:j1, :], -1, -2)) * scale
    s += -slopes[:, None, None] * distance_matrix(pos_q, np.arange(j0, j1)).astype(qd.dtype)[None]
    s += key_bias[:, None, None, j0:j1]
    return s


def attention_core_tiled(q: Tensor, k: Tensor, v: Tensor, slopes, mask=None, key_block: int = 64,
                         stats: TileStats | None = None) -> Tensor:
    b, nh, l, d = q.shape
    if key_block < 1:
        raise ConfigError(f"key_block must be >= 1, got {key_block}")
    mask = _check_mask(mask, b, l)
    dt = result_dtype(q.dtype, k.dtype, v.dtype)
    store = dt.storage
    qd, kd, vd = (t.data.astype(store, copy=False) for t in (q, k, v))
    sl = _slopes_array(slopes, nh).astype(store)
    key_bias = np.where(mask, 0.0, -np.inf).astype(store)
    scale = store(1.0 / math.sqrt(d))
    pos = np.arange(l)
    blocks = [(j0, min(l, j0 + key_block)) for j0 in range(0, l, key_block)]

    run_max = np.full((b, nh, l), -np.inf, dtype=store)
    denom = np.zeros((b, nh, l), dtype=store)
    acc = np.zeros((b, nh, l, d), dtype=store)
    for j0, j1 in blocks:
        s = _block_scores(qd, kd, sl, key_bias, pos, j0, j1, scale)
        if stats is not None:
            stats.observe(s)
        new_max = np.maximum(run_max, s.max(axis=-1))
        # rows whose keys so far are all masked keep a -inf max; park them at 0
        safe = np.where(np.isneginf(new_max), 0.0, new_max).astype(store)
        p = np.exp(s - safe[..., None])
        alpha = np.exp(run_max - safe)
        denom = alpha * denom + p.sum(axis=-1)
        acc = alpha[..., None] * acc + p @ vd[..., j0:j1, :]
        run_max = new_max
    out = acc / denom[..., None]
    lse = run_max + np.log(denom)

    def backward(g):
        g = g.astype(store, copy=False)
        delta = (g * out).sum(axis=-1)
        dq = np.zeros_like(qd)
        dk = np.zeros_like(kd)
        dv = np.zeros_like(vd)
        for j0, j1 in blocks:
            s = _block_scores(qd, kd, sl, key_bias, pos, j0, j1, scale)
            p = np.exp(s - lse[..., None])
            dv[..., j0:j1, :] += np.swapaxes(p, -1, -2) @ g
            dp = g @ np.swapaxes(vd[..., j0:j1, :], -1, -2)
            ds = p * (dp - delta[..., None])
            dq += (ds @ kd[..., j0:j1, :]) * scale
            dk[..., j0:j1, :] += (np.swapaxes(ds, -1, -2) @ qd) * scale
        return dq, dk, dv

    return make_op(out, (q, k, v), backward, dt, "tiled_attention")


# -- full blocks ---------------------------------------------------------

def mhsa_naive(x: Tensor, w: AttentionWeights, slopes, mask=None, *, dropout_p: float = 0.0, rng=None,
               training: bool = False) -> Tensor:
    with op_scope("attention"):
        q, k, v = _project(x, w)
        ctx = attention_core_naive(q, k, v, slopes, mask, dropout_p=dropout_p, rng=rng, training=training)
        return _linear(merge_heads(ctx), w.wo, w.bo)


def mhsa_tiled(x: Tensor, w: AttentionWeights, slopes, mask=None, key_block: int = 64,
               stats: TileStats | None = None) -> Tensor:
    with op_scope("attention"):
        q, k, v = _project(x, w)
        ctx = attention_core_tiled(q, k, v, slopes, mask, key_block, stats)
        return _linear(merge_heads(ctx), w.wo, w.bo)


def mhsa_unpadded(packed: PackedBatch, w: AttentionWeights, slopes, key_block: int | None = None,
                  stats: TileStats | None = None) -> PackedBatch:
    """Attention over a packed [T, H] stream, independently per segment.

    Projections run once over the whole stream.  ``key_block`` selects the
    tiled core for each segment; None uses the naive core.
    """
    validate_cu_seqlens(packed.cu_seqlens, total=len(packed.values))
    x = packed.values
    if not isinstance(x, Tensor):
        x = Tensor(x)
    out = attend_packed(x, packed.cu_seqlens, w, slopes, key_block, stats)
    return packed.with_values(out)


def attend_packed(x: Tensor, cu_seqlens: np.ndarray, w: AttentionWeights, slopes, key_block: int | None = None,
                  stats: TileStats | None = None) -> Tensor:
    with op_scope("attention"):
        t, h = x.shape
        nh, d = w.n_heads, w.head_dim
        if h != w.hidden:
            raise DimensionError(f"input width {h} != attention hidden {w.hidden}")
        q = _linear(x, w.wq, w.bq).reshape(t, nh, d)
        k = _linear(x, w.wk, w.bk).reshape(t, nh, d)
        v = _linear(x, w.wv, w.bv).reshape(t, nh, d)
        pieces = []
        for a, z in zip(cu_seqlens[:-1].tolist(), cu_seqlens[1:].tolist()):
            qs, ks, vs = (u[a:z].transpose(1, 0, 2).reshape(1, nh, z - a, d) for u in (q, k, v))
            if key_block is None:
                ctx = attention_core_naive(qs, ks, vs, slopes)
            else:
                ctx = attention_core_tiled(qs, ks, vs, slopes, None, key_block, stats)
            pieces.append(ctx.reshape(nh, z - a, d).transpose(1, 0, 2).reshape(z - a, h))
        merged = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
        return _linear(merged, w.wo, w.bo)
