"""BERT-style encoder with linear attention biases, gated feedforward,
unpadded execution and low-precision LayerNorm, in numpy."""
from .alibi import AlibiBias, AlibiSlopes, alibi_bias, alibi_bias_stack, alibi_slopes, extend_bias
from .attention import AttentionWeights, TileStats, mhsa_naive, mhsa_tiled, mhsa_unpadded
from .bench import ParetoPoint, ThroughputSample, cost_estimate, flops_per_token, measure_throughput, mfu, pareto_emit, pareto_front
from .config import RunConfig, build_run_config, resolve_run_config
from .data import Vocab, build_vocab, corpus_reader, mlm_mask, round_vocab, synthetic_corpus, wordpiece_tokenize
from .errors import *  # noqa: F401,F403
from .layers import EncoderConfig, EncoderWeights, count_params, init_weights, model_forward, preset
from .numerics import DType, Tape, Tensor, bf16_round, grad_check
from .train import Checkpoint, MetricsLog, OptimizerState, Schedule, adamw_step, finetune, lr_at, pretrain
from .unpad import PackedBatch, pad, unpad

__version__ = "0.1.0"
