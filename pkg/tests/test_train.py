import math

import numpy as np
import pytest

from mosaicbert.errors import (
    CheckpointFormatError,
    ConfigError,
    DivergenceError,
    IncompatibleCheckpointError,
    LengthError,
    ScheduleExhaustedError,
    SchemaError,
)
from mosaicbert.layers import EncoderConfig, init_weights, named_parameters
from mosaicbert.numerics import Tensor
from mosaicbert.train import (
    Checkpoint,
    FinetuneConfig,
    MetricsLog,
    MetricsRow,
    OptimizerState,
    Schedule,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    finetune,
    from_bytes,
    load_checkpoint,
    load_encoder,
    lr_at,
    presence_task,
    pretrain,
    save_checkpoint,
    to_bytes,
)
from mosaicbert.train.checkpoint import MAGIC
from mosaicbert.train.metrics import HEADER


def small_config(**changes) -> EncoderConfig:
    base = dict(hidden=32, n_heads=2, n_layers=1, intermediate=64, vocab_size=512, max_seq_len=32, key_block=16)
    base.update(changes)
    return EncoderConfig(**base)


SMALL_TRAIN = TrainConfig(total_steps=20, batch_size=8, lr_peak=1e-3, eval_every=5, checkpoint_every=5, seed=3)


@pytest.fixture(scope="module")
def pretrained(desk_corpus, tmp_path_factory):
    docs, vocab = desk_corpus
    out = tmp_path_factory.mktemp("pretrain")
    return pretrain(small_config(), docs, vocab, SMALL_TRAIN, out_dir=out)


# -- schedule -----------------------------------------------------------

@pytest.mark.parametrize("total", [100, 200, 1000, 70_000])
def test_schedule_endpoints(total):
    s = Schedule(total, lr_peak=5e-4)
    assert lr_at(0, s) == 0.0
    assert lr_at(int(0.06 * total), s) == 5e-4
    assert lr_at(total, s) == 0.02 * 5e-4


def test_schedule_shape():
    s = Schedule(1000, 1.0)
    assert lr_at(30, s) == pytest.approx(0.5)
    assert lr_at(60 + 470, s) == pytest.approx(0.51)
    with pytest.raises(ScheduleExhaustedError):
        lr_at(1001, s)
    with pytest.raises(ValueError):
        lr_at(-1, s)


@pytest.mark.parametrize("total", [17, 100, 333, 5000])
def test_schedule_continuity(total):
    s = Schedule(total, 2e-3)
    lrs = np.array([lr_at(t, s) for t in range(total + 1)])
    jumps = np.abs(np.diff(lrs))
    warm = math.ceil(0.06 * total)
    # warmup climbs at peak / warmup_steps per step; decay is much flatter
    assert jumps[:warm].max() <= 2e-3 / (0.06 * total) + 1e-15
    assert jumps[warm:].max() <= 2 * 2e-3 / total
    assert lrs.max() <= 2e-3


# -- optimizer ----------------------------------------------------------

def _scalar(value):
    return Tensor(np.array([value], dtype=np.float64), requires_grad=True)


def test_adamw_closed_form_first_step():
    p = {"w": _scalar(1.0)}
    adamw_step(p, {"w": np.array([1.0])}, OptimizerState(weight_decay=0.0), lr=0.1)
    assert p["w"].data[0] == pytest.approx(1 - 0.1 / (1 + 1e-6), abs=1e-15)
    assert abs(p["w"].data[0] - 0.9000001) < 1e-7


def test_adamw_zero_gradient_is_identity():
    rng = np.random.default_rng(0)
    p = {"a": Tensor(rng.normal(size=(3, 4)), requires_grad=True), "b": Tensor(rng.normal(size=4))}
    before = {k: v.data.copy() for k, v in p.items()}
    adamw_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, OptimizerState(weight_decay=0.0), lr=0.5)
    assert all(np.array_equal(p[k].data, before[k]) for k in p)


@pytest.mark.parametrize("lr", [0.0, 1e-3, 7.5])
def test_decoupled_decay_independent_of_lr(lr):
    w = np.full((2, 2), 3.0)
    p = {"w": Tensor(w.copy()), "bias": Tensor(np.full(2, 3.0))}
    adamw_step(p, {}, OptimizerState(weight_decay=1e-5), lr=lr)
    assert np.array_equal(p["w"].data, w - 1e-5 * w)
    assert np.array_equal(p["bias"].data, np.full(2, 3.0))


def test_adamw_matches_reference_adam():
    rng = np.random.default_rng(1)
    b1, b2, eps = 0.9, 0.98, 1e-6
    for _ in range(20):
        w0 = float(rng.normal())
        grads = rng.normal(size=15)
        lrs = rng.uniform(1e-4, 1e-1, size=15)
        p = {"w": _scalar(w0)}
        state = OptimizerState(weight_decay=0.0)
        w, m, v = w0, 0.0, 0.0
        for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
            adamw_step(p, {"w": np.array([g])}, state, lr)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            assert abs(p["w"].data[0] - w) < 1e-12
        assert state.t == 15


def test_adamw_names_divergent_parameter():
    p = {"ok": _scalar(1.0), "bad": _scalar(1.0)}
    with pytest.raises(DivergenceError) as e:
        adamw_step(p, {"ok": np.array([1.0]), "bad": np.array([np.nan])}, OptimizerState(), 0.1)
    assert e.value.parameter == "bad"


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.isclose(np.hypot(g["a"][0], g["b"][0]), 1.0)


# -- checkpoints --------------------------------------------------------

def test_checkpoint_bytes_roundtrip(tmp_path, pretrained):
    ckpt = pretrained.to_checkpoint(SMALL_TRAIN)
    raw = to_bytes(ckpt)
    assert raw.startswith(MAGIC)
    back = from_bytes(raw)
    assert to_bytes(back) == raw
    for name, arr in ckpt.arrays.items():
        assert np.array_equal(back.arrays[name], arr) and back.arrays[name].dtype == arr.dtype
    path = save_checkpoint(tmp_path / "c.bin", back)
    assert save_checkpoint(tmp_path / "d.bin", load_checkpoint(path)).read_bytes() == raw


def test_checkpoint_rejects_bad_files(pretrained):
    raw = bytearray(to_bytes(pretrained.to_checkpoint()))
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOTACKPT" + bytes(raw[8:]))
    raw[8] ^= 0x7F  # version field
    with pytest.raises(CheckpointFormatError):
        from_bytes(bytes(raw))
    good = to_bytes(pretrained.to_checkpoint())
    with pytest.raises(CheckpointFormatError):
        from_bytes(good[:-3])
    with pytest.raises(CheckpointFormatError):
        from_bytes(good + b"\0")


def test_checkpoint_supports_mixed_dtypes():
    ck = Checkpoint({"a": 1}, {"x": np.arange(6, dtype=np.float32).reshape(2, 3), "y": np.array([1.5]),
                               "z": np.array([-3, 4], dtype=np.int64)}, step=7, meta={"k": [1, 2]})
    back = from_bytes(to_bytes(ck))
    assert back.step == 7 and back.meta == {"k": [1, 2]} and back.config == {"a": 1}
    assert [back.arrays[k].dtype for k in "xyz"] == [np.float32, np.float64, np.int64]


# -- pretraining --------------------------------------------------------

def test_pretrain_writes_metrics_and_checkpoints(pretrained):
    assert [r.step for r in pretrained.metrics.rows] == [5, 10, 15, 20]
    assert [p.name for p in pretrained.checkpoints] == [f"ckpt_step{s:06d}.bin" for s in (5, 10, 15, 20)]
    assert len(pretrained.losses) == 20 and all(np.isfinite(pretrained.losses))
    assert abs(pretrained.losses[0] - math.log(512)) <= 0.1 * math.log(512)
    assert pretrained.metrics.rows[-1].eval_metric is None
    tokens = [r.tokens_seen for r in pretrained.metrics.rows]
    assert tokens == sorted(tokens) and tokens[-1] == pretrained.tokens_seen


def test_pretrain_is_deterministic(desk_corpus, pretrained):
    docs, vocab = desk_corpus
    again = pretrain(small_config(), docs, vocab, SMALL_TRAIN)
    assert again.losses == pretrained.losses
    for name, p in named_parameters(again.weights).items():
        assert np.array_equal(p.data, named_parameters(pretrained.weights)[name].data)


def test_resume_is_bit_exact(desk_corpus, pretrained):
    docs, vocab = desk_corpus
    resumed = pretrain(small_config(), docs, vocab, SMALL_TRAIN, resume_from=pretrained.checkpoints[1])
    assert resumed.losses == pretrained.losses[10:]
    assert resumed.metrics.to_csv(no_timing=True) == pretrained.metrics.to_csv(no_timing=True)
    for name, p in named_parameters(resumed.weights).items():
        assert np.array_equal(p.data, named_parameters(pretrained.weights)[name].data)


def test_resume_between_metrics_rows(desk_corpus, tmp_path):
    docs, vocab = desk_corpus
    settings = TrainConfig(total_steps=12, batch_size=4, lr_peak=1e-3, eval_every=4, checkpoint_every=6, seed=5)
    full = pretrain(small_config(), docs, vocab, settings, out_dir=tmp_path)
    resumed = pretrain(small_config(), docs, vocab, settings, resume_from=full.checkpoints[0])
    assert resumed.metrics.to_csv(no_timing=True) == full.metrics.to_csv(no_timing=True)


def test_resume_rejects_other_architecture(desk_corpus, pretrained):
    docs, vocab = desk_corpus
    with pytest.raises(IncompatibleCheckpointError) as e:
        pretrain(small_config(hidden=48), docs, vocab, SMALL_TRAIN, resume_from=pretrained.checkpoints[0])
    assert "hidden" in e.value.fields


def test_microbatches_average_gradients(desk_corpus):
    from mosaicbert.data import MLMBatch
    from mosaicbert.train.loop import _mlm_step, sample_batch, tokenize_corpus

    docs, vocab = desk_corpus
    cfg = small_config(ff_dropout=0.0, embed_dropout=0.0, dtype="f64", low_precision_ln=False)
    batch = sample_batch(tokenize_corpus(docs, vocab, 32), vocab, 0.3, seed=2, step=1, batch_size=6)

    def grads(b, micro):
        w = init_weights(cfg, 1)
        params = named_parameters(w)
        loss = _mlm_step(b, cfg, w, params, None, micro)
        return loss, {n: p.grad.copy() for n, p in params.items()}

    loss, split = grads(batch, 3)
    parts = [grads(MLMBatch(batch.input_ids[s], batch.labels[s], batch.attention_mask[s], batch.segment_ids[s]), 3)
             for s in (slice(0, 3), slice(3, 6))]
    assert loss == pytest.approx((parts[0][0] + parts[1][0]) / 2, abs=1e-12)
    for name, g in split.items():
        assert np.allclose(g, (parts[0][1][name] + parts[1][1][name]) / 2, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=4, microbatch=8)


def test_metrics_csv(tmp_path):
    log = MetricsLog("r", "mlm_loss")
    log.append(MetricsRow(10, 1.25, 320, 6.5, None))
    log.append(MetricsRow(20, 2.5, 640, 6.0, 0.75))
    text = log.to_csv(no_timing=True)
    assert text.splitlines()[0] == ",".join(HEADER) == "step,wallclock_s,tokens_seen,mlm_loss,eval_metric"
    assert text.splitlines()[1] == "10,,320,6.5,"
    path = tmp_path / "m.csv"
    log.write_csv(path)
    back = MetricsLog.read_csv(path)
    assert [r.to_dict() for r in back.rows] == [r.to_dict() for r in log.rows]
    with pytest.raises(SchemaError):
        MetricsLog.from_csv("step,loss\n1,2\n")


# -- finetuning ---------------------------------------------------------

def test_finetune_presence_task(desk_corpus, pretrained):
    _, vocab = desk_corpus
    task = presence_task(vocab, 256, 24, seed=1)
    result = finetune(pretrained.to_checkpoint(), task, settings=FinetuneConfig(steps=100, batch_size=16))
    acc = float((result.predict(task).argmax(axis=-1) == task.labels).mean())
    assert acc >= 0.95
    assert result.metrics.metric_name == "accuracy" and result.metrics.rows[-1].eval_metric >= 0.95


def test_chain_from_same_checkpoint_loads_identical_weights(pretrained):
    ck = pretrained.to_checkpoint()
    _, direct = load_encoder(ck)
    _, chained = load_encoder(ck, chain_from=ck)
    for name, p in named_parameters(direct).items():
        assert np.array_equal(p.data, named_parameters(chained)[name].data)
        assert np.array_equal(p.data, named_parameters(pretrained.weights)[name].data)


def test_chain_from_finetuned_checkpoint(desk_corpus, pretrained):
    _, vocab = desk_corpus
    task = presence_task(vocab, 64, 16, seed=2)
    first = finetune(pretrained.to_checkpoint(), task, steps=5)
    _, chained = load_encoder(pretrained.to_checkpoint(), chain_from=first.to_checkpoint())
    for name, p in named_parameters(chained).items():
        assert np.array_equal(p.data, named_parameters(first.weights)[name].data)


def test_chain_from_incompatible_lists_fields(pretrained):
    other = small_config(use_alibi=False, use_geglu=False, fused_glu=False)
    w = init_weights(other)
    from mosaicbert.train import parameter_arrays

    foreign = Checkpoint(other.to_dict(), parameter_arrays(w), 0, {})
    with pytest.raises(IncompatibleCheckpointError) as e:
        load_encoder(pretrained.to_checkpoint(), chain_from=foreign)
    assert set(e.value.fields) == {"use_alibi", "use_geglu", "fused_glu"}


def test_alibi_finetunes_past_pretraining_length(desk_corpus, pretrained):
    _, vocab = desk_corpus
    assert pretrained.config.max_seq_len == 32
    long_task = presence_task(vocab, 32, 64, seed=3)
    assert long_task.attention_mask.sum(axis=1).max() > 32
    result = finetune(pretrained.to_checkpoint(), long_task, steps=3)
    assert np.all(np.isfinite(result.losses))


def test_learned_positions_cannot_extend(desk_corpus):
    docs, vocab = desk_corpus
    base = small_config(use_alibi=False, use_geglu=False, fused_glu=False, use_unpadding=False)
    res = pretrain(base, docs, vocab, SMALL_TRAIN, total_steps=2, checkpoint_every=0)
    long_task = presence_task(vocab, 8, 64, seed=3)
    long_task = long_task.rows(np.flatnonzero(long_task.attention_mask.sum(axis=1) > 32))
    with pytest.raises(LengthError):
        finetune(res.to_checkpoint(), long_task, steps=1, batch_size=2)


def test_regression_head(desk_corpus, pretrained):
    _, vocab = desk_corpus
    task = presence_task(vocab, 64, 16, seed=4)
    task.labels = task.labels.astype(np.float64) * 2.0 - 1.0
    result = finetune(pretrained.to_checkpoint(), task, head="regression", steps=30)
    assert result.metrics.metric_name == "pearson"
    assert -1.0 <= result.metrics.rows[-1].eval_metric <= 1.0
