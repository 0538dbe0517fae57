"""Training: schedule, optimizer, checkpoints, metrics and the loops."""
from .checkpoint import FORMAT_VERSION, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from .loop import (
    FinetuneConfig,
    FinetuneResult,
    PretrainResult,
    TaskData,
    TaskHead,
    TrainConfig,
    architecture_diff,
    finetune,
    load_encoder,
    load_parameters,
    parameter_arrays,
    presence_task,
    pretrain,
    sample_batch,
    task_metric,
    tokenize_corpus,
)
from .metrics import HEADER, MetricsLog, MetricsRow
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .schedule import Schedule, lr_at

__all__ = [
    "FORMAT_VERSION", "HEADER", "Checkpoint", "FinetuneConfig", "FinetuneResult", "MetricsLog", "MetricsRow",
    "OptimizerState", "PretrainResult", "Schedule", "TaskData", "TaskHead", "TrainConfig", "adamw_step",
    "architecture_diff", "clip_grad_norm", "finetune", "from_bytes", "load_checkpoint", "load_encoder",
    "load_parameters", "lr_at", "parameter_arrays", "presence_task", "pretrain", "sample_batch",
    "save_checkpoint", "task_metric", "to_bytes", "tokenize_corpus",
]
