"""Encoder building blocks and model assembly.

Weights are plain dataclasses of Tensors; every forward function is a pure
function of (inputs, weights, config).  The block wiring is post-LayerNorm,
as in the original BERT:

    y = LN(x + Attn(x))
    z = LN(y + FF(y))
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .alibi import alibi_slopes
from .attention import AttentionWeights, TileStats, attend_packed, mhsa_naive, mhsa_tiled
from .errors import ConfigError, DataError, DimensionError, LengthError
from .numerics import (
    DType,
    MultiplyCounter,
    Tensor,
    bf16_round_like,
    dropout,
    gather_rows,
    gelu,
    make_op,
    matmul,
    op_scope,
)
from .numerics.tensor import result_dtype
from .unpad import PackedBatch, pad, unpad

LN_MODES = ("f32", "bf16")


@dataclass
class EncoderConfig:
    """Architecture record.  Defaults are MosaicBERT-Base."""

    hidden: int = 768
    n_heads: int = 12
    n_layers: int = 12
    intermediate: int = 3072
    vocab_size: int = 30528
    max_seq_len: int = 128
    type_vocab_size: int = 2
    mlm_ratio: float = 0.30
    use_alibi: bool = True
    use_geglu: bool = True
    fused_glu: bool = True
    use_unpadding: bool = True
    unpad_attention: bool = True
    low_precision_ln: bool = True
    attention_dropout: float = 0.0
    ff_dropout: float = 0.1
    embed_dropout: float = 0.1
    ln_eps: float = 1e-12
    attention_impl: str = "tiled"
    key_block: int = 64
    bf16_matmul: bool = False
    dtype: str = "f32"
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden < 1 or self.n_heads < 1 or self.n_layers < 0 or self.intermediate < 1:
            raise ConfigError("hidden, n_heads, intermediate must be positive and n_layers >= 0")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.max_seq_len < 1 or self.type_vocab_size < 1:
            raise ConfigError("max_seq_len and type_vocab_size must be >= 1")
        if not 0.0 < self.mlm_ratio < 1.0:
            raise ConfigError(f"mlm_ratio must lie in (0, 1), got {self.mlm_ratio}")
        for name in ("attention_dropout", "ff_dropout", "embed_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.attention_impl not in ("naive", "tiled"):
            raise ConfigError(f"attention_impl must be 'naive' or 'tiled', got {self.attention_impl!r}")
        if self.key_block < 1:
            raise ConfigError("key_block must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def ln_mode(self) -> str:
        return "bf16" if self.low_precision_ln else "f32"

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown EncoderConfig keys: {sorted(unknown)}")
        return cls(**d)


_BASELINE = dict(use_alibi=False, use_geglu=False, fused_glu=False, use_unpadding=False,
                 low_precision_ln=False, attention_dropout=0.1, mlm_ratio=0.15, attention_impl="naive")

PRESETS: dict[str, EncoderConfig] = {
    "bert-base": EncoderConfig(vocab_size=30522, **_BASELINE),
    "mosaicbert-base": EncoderConfig(),
    "bert-large": EncoderConfig(hidden=1024, n_heads=16, n_layers=24, intermediate=4096, vocab_size=30522,
                                **_BASELINE),
    "mosaicbert-large": EncoderConfig(hidden=1024, n_heads=16, n_layers=24, intermediate=4096),
}


def preset(name: str) -> EncoderConfig:
    try:
        return dataclasses.replace(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- weights ------------------------------------------------------------

@dataclass
class LayerNormWeights:
    gamma: Tensor
    beta: Tensor


@dataclass
class GegluWeights:
    w1: Tensor
    b1: Tensor
    v: Tensor
    bv: Tensor
    w2: Tensor
    b2: Tensor

    def fuse(self) -> "FusedGegluWeights":
        dt = self.w1.dtype
        return FusedGegluWeights(
            Tensor(np.concatenate([self.w1.data, self.v.data], axis=1), dt, requires_grad=True),
            Tensor(np.concatenate([self.b1.data, self.bv.data]), dt, requires_grad=True),
            Tensor(self.w2.data, dt, requires_grad=True),
            Tensor(self.b2.data, dt, requires_grad=True),
        )


@dataclass
class FusedGegluWeights:
    w_fused: Tensor  # [hidden, 2 * intermediate], columns W1 then V
    b_fused: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def intermediate(self) -> int:
        width = self.w_fused.shape[1]
        if width % 2:
            raise ConfigError(f"fused GLU width {width} is odd")
        return width // 2

    def split(self) -> GegluWeights:
        n, dt = self.intermediate, self.w_fused.dtype
        w, b = self.w_fused.data, self.b_fused.data
        return GegluWeights(
            Tensor(w[:, :n], dt, requires_grad=True), Tensor(b[:n], dt, requires_grad=True),
            Tensor(w[:, n:], dt, requires_grad=True), Tensor(b[n:], dt, requires_grad=True),
            Tensor(self.w2.data, dt, requires_grad=True), Tensor(self.b2.data, dt, requires_grad=True),
        )


@dataclass
class MLPWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


FFWeights = Union[GegluWeights, FusedGegluWeights, MLPWeights]


@dataclass
class BlockWeights:
    attn: AttentionWeights
    attn_ln: LayerNormWeights
    ff: FFWeights
    ff_ln: LayerNormWeights


@dataclass
class EmbeddingWeights:
    token: Tensor
    segment: Tensor
    ln: LayerNormWeights
    position: Tensor | None = None


@dataclass
class MLMHeadWeights:
    dense_w: Tensor
    dense_b: Tensor
    ln: LayerNormWeights
    decoder_bias: Tensor  # decoder matrix is tied to the token embedding


@dataclass
class EncoderWeights:
    embeddings: EmbeddingWeights
    blocks: list[BlockWeights]
    head: MLMHeadWeights


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a weight tree into dotted names (dataclass fields, lists, dicts)."""
    out: dict[str, Tensor] = {}

    def walk(o, p):
        if isinstance(o, Tensor):
            out[p] = o
        elif dataclasses.is_dataclass(o):
            for f in dataclasses.fields(o):
                walk(getattr(o, f.name), f"{p}.{f.name}" if p else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                walk(item, f"{p}.{i}" if p else str(i))
        elif isinstance(o, dict):
            for k, item in o.items():
                walk(item, f"{p}.{k}" if p else str(k))

    walk(obj, prefix)
    return out


def iter_parameters(obj) -> Iterator[Tensor]:
    yield from named_parameters(obj).values()


def init_weights(config: EncoderConfig, seed: int = 0) -> EncoderWeights:
    rng = np.random.default_rng(seed)
    dt = DType(config.dtype)
    h, n = config.hidden, config.intermediate

    def normal(*shape):
        return Tensor(rng.normal(0.0, config.init_std, size=shape), dt, requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), dt, requires_grad=True)

    def ln():
        return LayerNormWeights(Tensor(np.ones(h), dt, requires_grad=True), zeros(h))

    emb = EmbeddingWeights(
        token=normal(config.vocab_size, h),
        segment=normal(config.type_vocab_size, h),
        ln=ln(),
        position=None if config.use_alibi else normal(config.max_seq_len, h),
    )
    blocks = []
    for _ in range(config.n_layers):
        attn = AttentionWeights(normal(h, h), zeros(h), normal(h, h), zeros(h), normal(h, h), zeros(h),
                                normal(h, h), zeros(h), config.n_heads)
        if not config.use_geglu:
            ff = MLPWeights(normal(h, n), zeros(n), normal(n, h), zeros(h))
        elif config.fused_glu:
            ff = FusedGegluWeights(normal(h, 2 * n), zeros(2 * n), normal(n, h), zeros(h))
        else:
            ff = GegluWeights(normal(h, n), zeros(n), normal(h, n), zeros(n), normal(n, h), zeros(h))
        blocks.append(BlockWeights(attn, ln(), ff, ln()))
    head = MLMHeadWeights(normal(h, h), zeros(h), ln(), zeros(config.vocab_size))
    return EncoderWeights(emb, blocks, head)


def count_params(config: EncoderConfig) -> int:
    """Exact number of learnable scalars for ``config`` (decoder tied)."""
    h, n, v = config.hidden, config.intermediate, config.vocab_size
    emb = v * h + config.type_vocab_size * h + 2 * h
    if not config.use_alibi:
        emb += config.max_seq_len * h
    attn = 4 * (h * h + h)
    ff = (h * n + n) + (n * h + h)
    if config.use_geglu:
        ff += h * n + n
    per_layer = attn + ff + 2 * (2 * h)
    head = (h * h + h) + 2 * h + v
    return emb + config.n_layers * per_layer + head


# -- ops ----------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None, bf16: bool = False) -> Tensor:
    y = matmul(x, w, bf16=bf16)
    return y if b is None else y + b


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12, mode: str = "f32") -> Tensor:
    """LayerNorm over the last axis.

    ``mode="bf16"`` rounds the input, the normalized values and the output to
    bfloat16 while the mean and variance accumulate in the carrier precision
    (f32, or f64 on an f64 carrier).  The backward rule is the exact
    LayerNorm derivative at the rounded input (rounding is straight-through).
    """
    if mode not in LN_MODES:
        raise ConfigError(f"layernorm mode must be one of {LN_MODES}, got {mode!r}")
    low = mode == "bf16"
    dt = result_dtype(x.dtype, gamma.dtype, beta.dtype)
    store = dt.storage
    xd = x.data.astype(store, copy=False)
    if low:
        xd = bf16_round_like(xd)
    # shifting by the first element keeps constant rows exactly constant
    shifted = xd - xd[..., :1]
    centered = shifted - shifted.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + store(eps))
    xhat = centered * rstd
    g, b = gamma.data.astype(store, copy=False), beta.data.astype(store, copy=False)
    out = (bf16_round_like(xhat) if low else xhat) * g + b
    if low:
        out = bf16_round_like(out)
    lead = tuple(range(xd.ndim - 1))

    def backward(gy):
        dgamma = (gy * xhat).sum(axis=lead)
        dbeta = gy.sum(axis=lead)
        dxhat = gy * g
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), backward, dt, "layernorm")


def _ln(x: Tensor, w: LayerNormWeights, config: EncoderConfig) -> Tensor:
    return layernorm(x, w.gamma, w.beta, config.ln_eps, config.ln_mode)


def geglu_naive(x: Tensor, w: GegluWeights, dropout_p: float = 0.0, rng=None, training: bool = False,
                bf16: bool = False) -> Tensor:
    """(GeLU(x W1 + b1) * (x V + bv)) W2 + b2 with two separate projections."""
    if x.shape[-1] != w.w1.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != GLU hidden {w.w1.shape[0]}")
    with op_scope("ff"):
        act = gelu(linear(x, w.w1, w.b1, bf16))
        gate = linear(x, w.v, w.bv, bf16)
        h = dropout(act * gate, dropout_p, rng, training)
        return linear(h, w.w2, w.b2, bf16)


def geglu_fused(x: Tensor, w: FusedGegluWeights, dropout_p: float = 0.0, rng=None, training: bool = False,
                bf16: bool = False) -> Tensor:
    """Same as geglu_naive, but one matmul against [W1 | V] then a column split."""
    n = w.intermediate
    if x.shape[-1] != w.w_fused.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} != GLU hidden {w.w_fused.shape[0]}")
    with op_scope("ff"):
        both = linear(x, w.w_fused, w.b_fused, bf16)
        act = gelu(both[..., :n])
        gate = both[..., n:]
        h = dropout(act * gate, dropout_p, rng, training)
        return linear(h, w.w2, w.b2, bf16)


def mlp_ff(x: Tensor, w: MLPWeights, dropout_p: float = 0.0, rng=None, training: bool = False,
           bf16: bool = False) -> Tensor:
    with op_scope("ff"):
        h = dropout(gelu(linear(x, w.w1, w.b1, bf16)), dropout_p, rng, training)
        return linear(h, w.w2, w.b2, bf16)


def feedforward(x: Tensor, w: FFWeights, config: EncoderConfig, rng=None, training: bool = False) -> Tensor:
    fn = {GegluWeights: geglu_naive, FusedGegluWeights: geglu_fused, MLPWeights: mlp_ff}[type(w)]
    return fn(x, w, config.ff_dropout, rng, training, config.bf16_matmul)


def _validate_ids(ids: np.ndarray, limit: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= limit):
        raise DataError(f"{what} ids must lie in [0, {limit}), got range [{ids.min()}, {ids.max()}]")


def embed(token_ids, segment_ids, config: EncoderConfig, weights: EmbeddingWeights, *, training: bool = False,
          rng=None) -> Tensor:
    """Token + segment (+ learned position when ALiBi is off) -> LN -> dropout."""
    ids = np.asarray(token_ids, dtype=np.int64)
    seg = np.zeros_like(ids) if segment_ids is None else np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 2 or seg.shape != ids.shape:
        raise DimensionError(f"token ids must be [B, L] with matching segments, got {ids.shape} / {seg.shape}")
    b, l = ids.shape
    _validate_ids(ids, config.vocab_size, "token")
    _validate_ids(seg, config.type_vocab_size, "segment")
    if not config.use_alibi and l > config.max_seq_len:
        raise LengthError(f"sequence length {l} exceeds the learned position table ({config.max_seq_len})")
    h = config.hidden
    x = gather_rows(weights.token, ids.reshape(-1)) + gather_rows(weights.segment, seg.reshape(-1))
    if weights.position is not None:
        pos = np.tile(np.arange(l), b)
        x = x + gather_rows(weights.position, pos)
    x = _ln(x.reshape(b, l, h), weights.ln, config)
    return dropout(x, config.embed_dropout, rng, training)


def _slopes(config: EncoderConfig):
    if config.use_alibi:
        return alibi_slopes(config.n_heads)
    return np.zeros(config.n_heads)


def _attention(x, w: AttentionWeights, config: EncoderConfig, mask, training, rng, stats):
    slopes = _slopes(config)
    if isinstance(x, PackedBatch):
        kb = config.key_block if config.attention_impl == "tiled" else None
        if config.unpad_attention:
            return attend_packed(x.values, x.cu_seqlens, w, slopes, kb, stats)
        # feedforward-only unpadding: attention runs on the re-padded batch
        padded = pad(x)
        mask = np.arange(x.orig_len)[None, :] < x.seqlens[:, None]
        out = _attention(padded, w, config, mask, training, rng, stats)
        return unpad(out, mask).values
    use_dropout = training and config.attention_dropout > 0
    if config.attention_impl == "tiled" and not use_dropout:
        return mhsa_tiled(x, w, slopes, mask, config.key_block, stats)
    return mhsa_naive(x, w, slopes, mask, dropout_p=config.attention_dropout, rng=rng, training=training)


def encoder_block(x, weights: BlockWeights, config: EncoderConfig, mask=None, *, training: bool = False, rng=None,
                  stats: TileStats | None = None):
    """One post-LN transformer block over a padded Tensor or a PackedBatch.

    Returns the same kind it was given.
    """
    packed = isinstance(x, PackedBatch)
    h = x.values if packed else x
    a = _attention(x, weights.attn, config, mask, training, rng, stats)
    y = _ln(h + a, weights.attn_ln, config)
    z = _ln(y + feedforward(y, weights.ff, config, rng, training), weights.ff_ln, config)
    return x.with_values(z) if packed else z


def encode(token_ids, segment_ids, mask, config: EncoderConfig, weights: EncoderWeights, *,
           training: bool = False, rng=None, stats: TileStats | None = None, keep_packed: bool = False):
    """Embeddings plus all blocks.  Returns [B, L, H] (or a PackedBatch when
    ``keep_packed`` and unpadding is on)."""
    ids = np.asarray(token_ids)
    mask = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    x = embed(ids, segment_ids, config, weights.embeddings, training=training, rng=rng)
    if config.use_unpadding:
        state = unpad(x, mask)
        for blk in weights.blocks:
            state = encoder_block(state, blk, config, training=training, rng=rng, stats=stats)
        return state if keep_packed else pad(state)
    for blk in weights.blocks:
        x = encoder_block(x, blk, config, mask, training=training, rng=rng, stats=stats)
    return x


def mlm_head(hidden: Tensor, weights: EncoderWeights, config: EncoderConfig) -> Tensor:
    hd = weights.head
    with op_scope("head"):
        t = gelu(linear(hidden, hd.dense_w, hd.dense_b, config.bf16_matmul))
        t = _ln(t, hd.ln, config)
        return matmul(t, weights.embeddings.token.T, bf16=config.bf16_matmul) + hd.decoder_bias


def model_forward(token_ids, segment_ids, mask, config: EncoderConfig, weights: EncoderWeights, *,
                  training: bool = False, rng=None, stats: TileStats | None = None) -> Tensor:
    """MLM logits [B, L, vocab].  In unpadded mode padding rows are exact zeros."""
    out = encode(token_ids, segment_ids, mask, config, weights, training=training, rng=rng, stats=stats,
                 keep_packed=True)
    if isinstance(out, PackedBatch):
        return pad(out.with_values(mlm_head(out.values, weights, config)))
    return mlm_head(out, weights, config)


def count_ff_multiplies(token_ids, mask, config: EncoderConfig, weights: EncoderWeights) -> int:
    """Multiplies spent in feedforward sublayers for one inference forward."""
    with MultiplyCounter() as counter:
        model_forward(token_ids, None, mask, config, weights)
    return counter["ff"]

