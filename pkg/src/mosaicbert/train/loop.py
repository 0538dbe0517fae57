"""Pretraining and finetuning loops."""
from __future__ import annotations

import dataclasses
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..data import IGNORE_INDEX, MLMBatch, Vocab, make_mlm_batch, prepare_sequence, wordpiece_tokenize
from ..errors import ConfigError, DataError, DivergenceError, IncompatibleCheckpointError
from ..layers import EncoderConfig, EncoderWeights, encode, init_weights, model_forward, named_parameters
from ..numerics import DType, Tape, Tensor, cross_entropy, matmul, mse_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .metrics import MetricsLog, MetricsRow
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .schedule import Schedule, lr_at

# fields that change parameter shapes or layout; everything else may differ
ARCH_FIELDS = ("hidden", "n_heads", "n_layers", "intermediate", "vocab_size", "type_vocab_size", "use_alibi",
               "use_geglu", "fused_glu", "dtype")


def architecture_diff(a: EncoderConfig, b: EncoderConfig) -> list[str]:
    diff = [f for f in ARCH_FIELDS if getattr(a, f) != getattr(b, f)]
    if not (a.use_alibi or b.use_alibi) and a.max_seq_len != b.max_seq_len:
        diff.append("max_seq_len")
    return diff


def _require_compatible(a: EncoderConfig, b: EncoderConfig, what: str) -> None:
    diff = architecture_diff(a, b)
    if diff:
        detail = ", ".join(f"{f}: {getattr(a, f)!r} != {getattr(b, f)!r}" for f in diff)
        raise IncompatibleCheckpointError(f"{what} is incompatible ({detail})", diff)


@dataclass
class TrainConfig:
    total_steps: int = 200
    batch_size: int = 16
    microbatch: int | None = None
    lr_peak: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.06
    final_lr_fraction: float = 0.02
    eval_every: int = 10
    checkpoint_every: int = 0
    grad_clip: float | None = None
    seed: int = 0
    prefetch: int = 2
    run_id: str = "pretrain"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.microbatch is not None and not 1 <= self.microbatch <= self.batch_size:
            raise ConfigError("microbatch must lie in [1, batch_size]")
        if self.eval_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("eval_every must be >= 1 and checkpoint_every >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.total_steps, self.lr_peak, self.warmup_fraction, self.final_lr_fraction)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.betas, self.eps, self.weight_decay)


# -- parameter plumbing ----------------------------------------------------

def parameter_arrays(weights, prefix: str = "param") -> dict[str, np.ndarray]:
    return {f"{prefix}/{n}": p.data.copy() for n, p in named_parameters(weights).items()}


def load_parameters(weights, arrays: dict[str, np.ndarray]) -> None:
    """Copy named arrays into ``weights`` in place (shapes must agree)."""
    params = named_parameters(weights)
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint lacks parameters {missing[:5]}", ["parameters"])
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape:
            raise IncompatibleCheckpointError(f"parameter {name} has shape {arr.shape}, expected {p.shape}",
                                              ["parameters"])
        p.data[...] = arr


def _as_checkpoint(ckpt: Checkpoint | str | Path) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def load_encoder(checkpoint, config: EncoderConfig | None = None, chain_from=None):
    """Encoder config and weights from ``checkpoint`` (or ``chain_from``, whose
    architecture must agree)."""
    ckpt = _as_checkpoint(checkpoint)
    base = EncoderConfig.from_dict(ckpt.config)
    if config is not None:
        _require_compatible(base, config, "requested config vs checkpoint")
    source = ckpt
    if chain_from is not None:
        source = _as_checkpoint(chain_from)
        _require_compatible(base, EncoderConfig.from_dict(source.config), "chain_from checkpoint")
    cfg = config or base
    weights = init_weights(cfg, 0)
    load_parameters(weights, source.group("param"))
    return cfg, weights


# -- batches ---------------------------------------------------------------

def tokenize_corpus(documents: Iterable[str], vocab: Vocab, max_seq_len: int) -> list[list[int]]:
    seqs = [prepare_sequence(wordpiece_tokenize(d, vocab), vocab, max_seq_len) for d in documents]
    if not seqs:
        raise DataError("corpus is empty")
    return seqs


def sample_batch(sequences: Sequence[Sequence[int]], vocab: Vocab, ratio: float, seed: int, step: int,
                 batch_size: int) -> MLMBatch:
    """Rows drawn with a generator keyed on (seed, step), masked per row."""
    pick = np.random.default_rng([int(seed), int(step), 0x5EED]).integers(0, len(sequences), size=batch_size)
    return make_mlm_batch([sequences[i] for i in pick], vocab, ratio, seed, step)


_END = object()


def _prefetch(make: Callable[[int], object], steps: Iterable[int], depth: int) -> Iterator:
    """Produce ``make(step)`` ahead of the consumer through a bounded queue."""
    if depth <= 0:
        for s in steps:
            yield make(s)
        return
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                pass
        return False

    def worker():
        try:
            for s in steps:
                if not put(make(s)):
                    return
        except BaseException as e:  # handed to the consumer
            put(e)
            return
        put(_END)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _END:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        t.join()


# -- pretraining -----------------------------------------------------------

@dataclass
class PretrainResult:
    config: EncoderConfig
    weights: EncoderWeights
    optimizer: OptimizerState
    metrics: MetricsLog
    losses: list[float]
    step: int
    tokens_seen: int
    checkpoints: list[Path] = field(default_factory=list)
    rng: np.random.Generator | None = None
    window: list[float] = field(default_factory=list)  # losses since the last metrics row

    def to_checkpoint(self, settings: TrainConfig | None = None) -> Checkpoint:
        return _training_checkpoint(self.config, self.weights, self.optimizer, self.step, self.rng, self.metrics,
                                    self.tokens_seen, settings, self.window)


def _training_checkpoint(config, weights, opt: OptimizerState, step, rng, metrics: MetricsLog, tokens_seen,
                         settings: TrainConfig | None, window=()) -> Checkpoint:
    arrays = parameter_arrays(weights)
    for name in named_parameters(weights):
        if name in opt.m:
            arrays[f"adam_m/{name}"] = opt.m[name].copy()
            arrays[f"adam_v/{name}"] = opt.v[name].copy()
    meta = {
        "optimizer": opt.hyperparameters(),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "metrics_tail": metrics.tail(1000),
        "metrics_run": [metrics.run_id, metrics.metric_name],
        "tokens_seen": int(tokens_seen),
        "loss_window": [float(x) for x in window],
        "train": _jsonable(dataclasses.asdict(settings)) if settings is not None else None,
    }
    return Checkpoint(config.to_dict(), arrays, int(step), meta)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _restore_metrics(meta: dict) -> MetricsLog:
    run_id, metric = meta.get("metrics_run") or ["run", "mlm_loss"]
    log = MetricsLog(run_id, metric)
    for r in meta.get("metrics_tail") or []:
        log.append(MetricsRow(**r))
    return log


def _cast_params(weights, dtype: DType) -> None:
    for p in named_parameters(weights).values():
        if p.dtype is not dtype:
            p.data = p.data.astype(dtype.storage)
            p.dtype = dtype


def pretrain(config: EncoderConfig, corpus: Iterable[str] | Sequence[Sequence[int]], vocab: Vocab,
             settings: TrainConfig | None = None, *, out_dir: str | Path | None = None,
             resume_from: Checkpoint | str | Path | None = None, weights: EncoderWeights | None = None,
             on_step: Callable[[int, float], None] | None = None, **overrides) -> PretrainResult:
    """MLM pretraining.

    ``corpus`` is either raw documents or already tokenized id sequences.
    Every random draw is keyed on (seed, step) except dropout, whose
    generator state travels with the checkpoint, so a resumed run replays
    the unbroken one exactly.
    """
    settings = dataclasses.replace(settings or TrainConfig(), **overrides)
    if config.vocab_size < vocab.effective_size:
        raise ConfigError(f"config vocab_size {config.vocab_size} is smaller than the vocabulary "
                          f"({vocab.effective_size})")
    corpus = list(corpus)
    if corpus and isinstance(corpus[0], str):
        sequences = tokenize_corpus(corpus, vocab, config.max_seq_len)
    else:
        sequences = [list(s) for s in corpus]
    if not sequences:
        raise DataError("corpus is empty")
    schedule = settings.schedule

    if resume_from is not None:
        ckpt = _as_checkpoint(resume_from)
        _require_compatible(EncoderConfig.from_dict(ckpt.config), config, "resume checkpoint")
        weights = init_weights(config, settings.seed)
        load_parameters(weights, ckpt.group("param"))
        hp = ckpt.meta["optimizer"]
        opt = OptimizerState(tuple(hp["betas"]), hp["eps"], hp["weight_decay"], hp["t"],
                             {k: v.copy() for k, v in ckpt.group("adam_m").items()},
                             {k: v.copy() for k, v in ckpt.group("adam_v").items()})
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng_state"]
        metrics = _restore_metrics(ckpt.meta)
        start, tokens_seen = ckpt.step, int(ckpt.meta.get("tokens_seen", 0))
        window = list(ckpt.meta.get("loss_window", []))
        clock_offset = (metrics.rows[-1].wallclock_s or 0.0) if metrics.rows else 0.0
    else:
        weights = weights or init_weights(config, settings.seed)
        opt = settings.optimizer()
        rng = np.random.default_rng([settings.seed, 0xD0])
        metrics = MetricsLog(settings.run_id, "mlm_loss")
        start, tokens_seen, clock_offset = 0, 0, 0.0
        window = []
    _cast_params(weights, DType(config.dtype))
    params = named_parameters(weights)
    result = PretrainResult(config, weights, opt, metrics, [], start, tokens_seen, rng=rng, window=window)
    last_ckpt: Path | None = None
    t0 = time.perf_counter()

    def make(step: int) -> MLMBatch:
        return sample_batch(sequences, vocab, config.mlm_ratio, settings.seed, step, settings.batch_size)

    for step, batch in zip(range(start + 1, settings.total_steps + 1),
                           _prefetch(make, range(start + 1, settings.total_steps + 1), settings.prefetch)):
        loss = _mlm_step(batch, config, weights, params, rng, settings.microbatch or settings.batch_size)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step}", last_checkpoint=last_ckpt)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        if settings.grad_clip is not None:
            clip_grad_norm(grads, settings.grad_clip)
        try:
            adamw_step(params, grads, opt, lr_at(step, schedule))
        except DivergenceError as e:
            e.last_checkpoint = last_ckpt
            raise
        finally:
            for p in params.values():
                p.grad = None
        tokens_seen += batch.n_real_tokens
        result.losses.append(loss)
        window.append(loss)
        result.step, result.tokens_seen = step, tokens_seen
        if on_step is not None:
            on_step(step, loss)
        if step % settings.eval_every == 0 or step == settings.total_steps:
            wall = clock_offset + time.perf_counter() - t0
            metrics.append(MetricsRow(step, wall, tokens_seen, float(np.mean(window)), None))
            window.clear()
        if out_dir is not None and settings.checkpoint_every and (
                step % settings.checkpoint_every == 0 or step == settings.total_steps):
            path = Path(out_dir) / f"ckpt_step{step:06d}.bin"
            save_checkpoint(path, result.to_checkpoint(settings))
            result.checkpoints.append(path)
            last_ckpt = path
    return result


def _mlm_step(batch: MLMBatch, config, weights, params, rng, microbatch: int) -> float:
    """Forward and backward over microbatches; gradients are averaged."""
    b = batch.input_ids.shape[0]
    chunks = [slice(i, min(b, i + microbatch)) for i in range(0, b, microbatch)]
    total = 0.0
    for sl in chunks:
        mask = batch.attention_mask[sl]
        width = int(mask.sum(axis=1).max())
        with Tape() as tape:
            logits = model_forward(batch.input_ids[sl, :width], batch.segment_ids[sl, :width], mask[:, :width],
                                   config, weights, training=True, rng=rng)
            loss = cross_entropy(logits, batch.labels[sl, :width], IGNORE_INDEX)
        if loss.requires_grad:
            tape.backward(loss, np.asarray(1.0 / len(chunks), dtype=loss.data.dtype))
        total += loss.item()
    return total / len(chunks)


# -- finetuning ------------------------------------------------------------

@dataclass
class TaskData:
    input_ids: np.ndarray  # [N, L]
    attention_mask: np.ndarray  # [N, L] bool
    labels: np.ndarray  # [N] int classes or float targets
    segment_ids: np.ndarray | None = None

    def __post_init__(self):
        self.input_ids = np.asarray(self.input_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        self.labels = np.asarray(self.labels)
        if self.input_ids.ndim != 2 or self.attention_mask.shape != self.input_ids.shape:
            raise DataError("task input_ids and attention_mask must both be [N, L]")
        if self.labels.shape != (self.input_ids.shape[0],):
            raise DataError(f"task labels must be [N], got {self.labels.shape}")
        if self.segment_ids is None:
            self.segment_ids = np.zeros_like(self.input_ids)

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    def rows(self, idx) -> "TaskData":
        width = int(self.attention_mask[idx].sum(axis=1).max())
        return TaskData(self.input_ids[idx, :width], self.attention_mask[idx, :width], self.labels[idx],
                        self.segment_ids[idx, :width])


def presence_task(vocab: Vocab, n: int, length: int, seed: int = 0, trigger: int | None = None) -> TaskData:
    """Binary task: label 1 iff a trigger token occurs in the sequence.

    Rows are [CLS] content [SEP] with random content length, right padded.
    """
    if length < 4:
        raise ConfigError("length must be >= 4")
    rng = np.random.default_rng(seed)
    normal = vocab.normal_ids()
    trigger = int(normal[0]) if trigger is None else int(trigger)
    others = normal[normal != trigger]
    ids = np.full((n, length), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((n, length), dtype=bool)
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        k = int(rng.integers(max(2, (length - 2) // 2), length - 1))
        content = rng.choice(others, size=k)
        if labels[i]:
            content[rng.integers(k)] = trigger
        row = [vocab.cls_id, *content.tolist(), vocab.sep_id]
        ids[i, : len(row)] = row
        mask[i, : len(row)] = True
    return TaskData(ids, mask, labels)


@dataclass
class FinetuneConfig:
    steps: int = 100
    batch_size: int = 16
    lr_peak: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.06
    final_lr_fraction: float = 0.02
    eval_every: int = 10
    n_classes: int = 2
    seed: int = 0
    run_id: str = "finetune"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size and eval_every must be >= 1")


@dataclass
class TaskHead:
    w: Tensor  # [H, n_out]
    b: Tensor  # [n_out]


@dataclass
class FinetuneResult:
    config: EncoderConfig
    weights: EncoderWeights
    head: TaskHead
    kind: str
    metrics: MetricsLog
    losses: list[float]

    def to_checkpoint(self) -> Checkpoint:
        arrays = parameter_arrays(self.weights)
        arrays.update(parameter_arrays(self.head, "head"))
        return Checkpoint(self.config.to_dict(), arrays, len(self.losses), {"task_head": self.kind})

    def predict(self, task: TaskData) -> np.ndarray:
        return _head_forward(task, self.config, self.weights, self.head, training=False, rng=None).data


def _head_forward(task: TaskData, config, weights, head: TaskHead, *, training: bool, rng) -> Tensor:
    hidden = encode(task.input_ids, task.segment_ids, task.attention_mask, config, weights, training=training, rng=rng)
    return matmul(hidden[:, 0, :], head.w) + head.b


def task_metric(kind: str, pred: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy for classification, Pearson correlation for regression."""
    if kind == "classification":
        return float((pred.argmax(axis=-1) == labels).mean())
    p, y = pred.reshape(-1).astype(np.float64), labels.astype(np.float64)
    if p.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(p, y)[0, 1])


def finetune(checkpoint: Checkpoint | str | Path, task: TaskData, head: str = "classification",
             chain_from: Checkpoint | str | Path | None = None, settings: FinetuneConfig | None = None,
             config: EncoderConfig | None = None, **overrides) -> FinetuneResult:
    """Train a fresh [CLS] projection head together with the encoder.

    Encoder weights come from ``chain_from`` when given (a checkpoint already
    finetuned on another task), otherwise from ``checkpoint``.
    """
    if head not in ("classification", "regression"):
        raise ConfigError(f"head must be 'classification' or 'regression', got {head!r}")
    settings = dataclasses.replace(settings or FinetuneConfig(), **overrides)
    cfg, weights = load_encoder(checkpoint, config, chain_from)
    dt = DType(cfg.dtype)
    n_out = settings.n_classes if head == "classification" else 1
    hrng = np.random.default_rng([settings.seed, 0x4EAD])
    th = TaskHead(Tensor(hrng.normal(0.0, cfg.init_std, size=(cfg.hidden, n_out)), dt, requires_grad=True),
                  Tensor(np.zeros(n_out), dt, requires_grad=True))
    if head == "classification" and (task.labels.min() < 0 or task.labels.max() >= n_out):
        raise DataError(f"class labels must lie in [0, {n_out})")
    params = {**named_parameters(weights), **{f"head.{k}": v for k, v in named_parameters(th).items()}}
    opt = OptimizerState(settings.betas, settings.eps, settings.weight_decay)
    schedule = Schedule(settings.steps, settings.lr_peak, settings.warmup_fraction, settings.final_lr_fraction)
    drop = np.random.default_rng([settings.seed, 0xD1])
    log = MetricsLog(settings.run_id, "accuracy" if head == "classification" else "pearson")
    losses: list[float] = []
    window: list[float] = []
    seen = 0
    t0 = time.perf_counter()
    for step in range(1, settings.steps + 1):
        pick = np.random.default_rng([settings.seed, step, 0xF7]).integers(0, len(task), size=settings.batch_size)
        batch = task.rows(pick)
        with Tape() as tape:
            out = _head_forward(batch, cfg, weights, th, training=True, rng=drop)
            if head == "classification":
                loss = cross_entropy(out, batch.labels.astype(np.int64))
            else:
                loss = mse_loss(out, batch.labels)
        tape.backward(loss)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"finetuning loss became {value} at step {step}")
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        try:
            adamw_step(params, grads, opt, lr_at(step, schedule))
        finally:
            for p in params.values():
                p.grad = None
        losses.append(value)
        window.append(value)
        seen += int(batch.attention_mask.sum())
        if step % settings.eval_every == 0 or step == settings.steps:
            pred = _head_forward(task, cfg, weights, th, training=False, rng=None).data
            log.append(MetricsRow(step, time.perf_counter() - t0, seen, float(np.mean(window)),
                                  task_metric(head, pred, task.labels)))
            window = []
    return FinetuneResult(cfg, weights, th, head, log, losses)
