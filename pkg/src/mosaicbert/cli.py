"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 divergence, measurement failure or a failed self-check.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bench
from .config import SCALES, RunConfig, resolve_run_config
from .data import Vocab, build_vocab, corpus_reader, detokenize, synthetic_corpus, wordpiece_tokenize
from .errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    DivergenceError,
    IncompatibleCheckpointError,
    MeasurementError,
    PackingError,
    SchemaError,
)
from .layers import PRESETS, count_params, init_weights, preset
from .train import MetricsLog, TaskData, finetune, load_checkpoint, presence_task, pretrain, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--scale", choices=SCALES)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.lr_peak=1e-3")
    p.add_argument("--seed", type=int, help="run seed (falls back to $MOSAIC_SEED)")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--no-timing", action="store_true", help="leave wallclock columns empty in CSV output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mosaicbert", description="Encoder pretraining, finetuning and accounting tools.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("pretrain", help="MLM pretraining")
    _run_args(p)
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="finetune a pretrained checkpoint")
    _run_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chain-from", help="initialise the encoder from this (finetuned) checkpoint")
    p.add_argument("--head", choices=("classification", "regression"), default="classification")
    p.add_argument("--task-file", help="TSV of label<TAB>text; default is a synthetic token-presence task")
    p.add_argument("--vocab", help="vocab file for --task-file")
    p.add_argument("--task-size", type=int, default=256)
    p.add_argument("--seq-len", type=int, help="task sequence length (may exceed pretraining length with ALiBi)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("bench", help="padded vs unpadded throughput on a synthetic batch")
    _run_args(p)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("pareto", help="Pareto CSV from metrics logs")
    p.add_argument("logs", nargs="+", help="metrics CSV files (run id = file stem)")
    p.add_argument("--metric", default="mlm_loss", help="mlm_loss or the eval metric name")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("mfu", help="model FLOPs utilization")
    p.add_argument("--params", type=float, help="parameter count (or use --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--tps", type=float, required=True, help="observed tokens per second")
    p.add_argument("--devices", type=float, required=True)
    p.add_argument("--peak", type=float, default=bench.A100_BF16_PEAK, help="peak FLOP/s per device")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("cost", help="training cost estimate")
    p.add_argument("--hours", type=str, nargs="+", required=True)
    p.add_argument("--devices", type=str, required=True)
    p.add_argument("--price", type=str, required=True, help="price per device-hour")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("tokenize", help="WordPiece tokenization")
    p.add_argument("--vocab", help="vocab file; otherwise one is built from --corpus")
    p.add_argument("--corpus", help="corpus file or directory used to build a vocab")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--write-vocab", help="save the vocab used")
    p.add_argument("--text", help="text to tokenize (default: stdin)")
    p.add_argument("--tokens", action="store_true", help="print word pieces instead of ids")

    p = sub.add_parser("count-params", help="exact learnable parameter count")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--json", action="store_true")

    sub.add_parser("check", help="run the fast invariant suite")
    return parser


# -- helpers ---------------------------------------------------------------

def _resolve(args) -> RunConfig:
    cfg = resolve_run_config(args.config, args.overrides, args.preset, args.scale)
    seed = args.seed
    if seed is None and os.environ.get("MOSAIC_SEED"):
        try:
            seed = int(os.environ["MOSAIC_SEED"])
        except ValueError:
            raise ConfigError(f"MOSAIC_SEED must be an integer, got {os.environ['MOSAIC_SEED']!r}") from None
    if seed is not None:
        cfg.seed = cfg.train.seed = cfg.finetune.seed = seed
    return cfg


def _documents(cfg: RunConfig) -> list[str]:
    if cfg.data.corpus:
        docs = list(corpus_reader(cfg.data.corpus))
    else:
        docs = synthetic_corpus(cfg.data.synthetic_docs, seed=cfg.seed)
    if not docs:
        raise DataError("corpus is empty")
    return docs


def _vocab(cfg: RunConfig, docs: list[str]) -> Vocab:
    if cfg.data.vocab:
        vocab = Vocab.from_file(cfg.data.vocab)
    else:
        vocab = build_vocab(docs, cfg.model.vocab_size, cfg.data.lowercase, cfg.data.vocab_multiple)
    if vocab.effective_size > cfg.model.vocab_size:
        raise ConfigError(f"vocabulary ({vocab.effective_size}) exceeds model vocab_size {cfg.model.vocab_size}")
    return vocab.padded_to(cfg.model.vocab_size)


def _emit(rows: list[dict], as_json: bool, out) -> None:
    out.write(bench.to_json(rows if len(rows) != 1 else rows[0]) + "\n" if as_json else bench.format_table(rows))


# -- subcommands -----------------------------------------------------------

def cmd_pretrain(args, out) -> int:
    cfg = _resolve(args)
    if args.dump_config:
        out.write(cfg.to_json())
        return EXIT_OK
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = _documents(cfg)
    vocab = _vocab(cfg, docs)
    vocab.to_file(out_dir / "vocab.txt")
    (out_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    settings, _ = cfg.seeded()
    result = pretrain(cfg.model, docs, vocab, settings, out_dir=out_dir, resume_from=args.resume)
    result.metrics.write_csv(out_dir / "metrics.csv", no_timing=args.no_timing)
    final = save_checkpoint(out_dir / "final.bin", result.to_checkpoint(settings))
    out.write(f"steps {result.step}  tokens {result.tokens_seen}  first loss {result.losses[0]:.4f}  "
              f"last loss {result.losses[-1]:.4f}\n" if result.losses else "nothing to do\n")
    out.write(f"metrics {out_dir / 'metrics.csv'}\ncheckpoint {final}\n")
    return EXIT_OK


def _read_task(path: str, vocab: Vocab, seq_len: int, head: str) -> TaskData:
    from .data import collate, prepare_sequence

    seqs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected label<TAB>text")
            lab, text = line.split("\t", 1)
            try:
                labels.append(int(lab) if head == "classification" else float(lab))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad label {lab!r}") from None
            seqs.append(prepare_sequence(wordpiece_tokenize(text, vocab), vocab, seq_len))
    if not seqs:
        raise DataError(f"{path} holds no examples")
    ids, mask = collate(seqs, vocab)
    return TaskData(ids, mask, np.asarray(labels))


def cmd_finetune(args, out) -> int:
    cfg = _resolve(args)
    if args.dump_config:
        out.write(cfg.to_json())
        return EXIT_OK
    ckpt = load_checkpoint(args.checkpoint)
    ckpt_dir = Path(args.checkpoint).parent
    vocab_path = args.vocab or ckpt_dir / "vocab.txt"
    seq_len = args.seq_len or ckpt.config["max_seq_len"]
    if args.task_file:
        task = _read_task(args.task_file, Vocab.from_file(vocab_path), seq_len, args.head)
    else:
        vocab = Vocab.from_file(vocab_path) if Path(vocab_path).exists() else None
        if vocab is None:
            raise DataError(f"no vocab at {vocab_path}; pass --vocab")
        task = presence_task(vocab, args.task_size, seq_len, seed=cfg.seed)
        if args.head == "regression":
            task.labels = task.labels.astype(np.float64)
    _, ft = cfg.seeded()
    result = finetune(ckpt, task, args.head, chain_from=args.chain_from, settings=ft)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.metrics.write_csv(out_dir / "finetune_metrics.csv", no_timing=args.no_timing)
    path = save_checkpoint(out_dir / "finetuned.bin", result.to_checkpoint())
    last = result.metrics.rows[-1]
    out.write(f"{result.metrics.metric_name} {last.eval_metric:.4f}  loss {last.mlm_loss:.4f}\n"
              f"metrics {out_dir / 'finetune_metrics.csv'}\ncheckpoint {path}\n")
    return EXIT_OK


def _lengths_for(batch: int, length: int, pad_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Row lengths whose total hits the requested pad fraction exactly
    (up to rounding), varied in pairs so the sum is preserved."""
    real = min(batch * length, max(batch, round(batch * length * (1.0 - pad_fraction))))
    lens = np.full(batch, real // batch)
    lens[: real % batch] += 1
    for i in range(0, batch - 1, 2):
        room = min(length - lens[i], lens[i + 1] - 1)
        if room > 0:
            d = int(rng.integers(0, room + 1))
            lens[i] += d
            lens[i + 1] -= d
    return lens


def cmd_bench(args, out) -> int:
    cfg = _resolve(args)
    if args.dump_config:
        out.write(cfg.to_json())
        return EXIT_OK
    b = cfg.bench
    rng = np.random.default_rng(cfg.seed)
    length = min(b.seq_len, cfg.model.max_seq_len) if not cfg.model.use_alibi else b.seq_len
    lens = _lengths_for(b.batch_size, length, b.pad_fraction, rng)
    mask = np.arange(length)[None, :] < lens[:, None]
    ids = np.where(mask, rng.integers(5, cfg.model.vocab_size, size=mask.shape), 0)
    rows = []
    for unpadded in (False, True):
        model = cfg.model.replace(use_unpadding=unpadded, unpad_attention=unpadded)
        weights = init_weights(model, cfg.seed)
        s = bench.measure_throughput(weights, model, ids, mask, b.n_trials, b.warmup_trials,
                                     peak_flops_per_device=b.peak_flops_per_device)
        rows.append({"mode": "unpadded" if unpadded else "padded", "real_tok_s": f"{s.tokens_per_second:.1f}",
                     "padded_tok_s": f"{s.padded_tokens_per_second:.1f}", "median_s": f"{s.wallclock_s:.4f}",
                     "ff_multiplies": s.ff_multiplies, "pad_fraction": f"{1 - s.real_tokens / s.padded_tokens:.3f}"})
    _emit(rows, args.json, out)
    return EXIT_OK


def cmd_pareto(args, out) -> int:
    paths = [Path(p) for p in args.logs]
    stems = [p.stem for p in paths]
    ids = [f"{p.parent.name}/{p.stem}" if stems.count(p.stem) > 1 else p.stem for p in paths]
    logs = [MetricsLog.read_csv(p, run_id=r, metric_name=args.metric) for p, r in zip(paths, ids)]
    untimed = [str(p) for p, log in zip(paths, logs) if any(r.wallclock_s is None for r in log.rows)]
    if untimed:
        print(f"warning: no wallclock in {', '.join(untimed)}; those rows count as 0 hours", file=sys.stderr)
    text = bench.pareto_emit(logs, args.metric)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


def cmd_mfu(args, out) -> int:
    if (args.params is None) == (args.preset is None):
        raise UsageError("mfu: give exactly one of --params or --preset")
    n = args.params if args.params is not None else count_params(preset(args.preset))
    value = bench.mfu(n, args.tps, args.devices, args.peak)
    _emit([{"params": f"{n:g}", "tokens_per_s": f"{args.tps:g}", "devices": f"{args.devices:g}",
            "peak_flops": f"{args.peak:g}", "mfu": bench.format_percent(value)}], args.json, out)
    return EXIT_OK


def cmd_cost(args, out) -> int:
    from decimal import Decimal, InvalidOperation

    try:
        hours = [Decimal(h) for h in args.hours]
        devices, price = Decimal(args.devices), Decimal(args.price)
    except InvalidOperation:
        raise UsageError("cost: --hours, --devices and --price must be numbers") from None
    rows = [{"hours": str(h), "devices": str(devices), "price": bench.format_money(price),
             "cost": bench.format_money(bench.cost_estimate(h, devices, price))} for h in hours]
    _emit(rows, args.json, out)
    return EXIT_OK


def cmd_tokenize(args, out) -> int:
    if args.vocab:
        vocab = Vocab.from_file(args.vocab)
    elif args.corpus:
        vocab = build_vocab(corpus_reader(args.corpus), args.vocab_size)
    else:
        raise UsageError("tokenize: give --vocab or --corpus")
    if args.write_vocab:
        vocab.to_file(args.write_vocab)
    text = args.text if args.text is not None else sys.stdin.read()
    for line in text.splitlines():
        ids = wordpiece_tokenize(line, vocab)
        out.write((" ".join(vocab.id_to_token(i) for i in ids) if args.tokens else " ".join(map(str, ids))) + "\n")
    return EXIT_OK


def cmd_count_params(args, out) -> int:
    if args.config or args.overrides:
        cfgs = {args.preset or "config": resolve_run_config(args.config, args.overrides, args.preset).model}
    elif args.preset:
        cfgs = {args.preset: preset(args.preset)}
    else:
        cfgs = {name: preset(name) for name in PRESETS}
    rows = [{"model": k, "params": f"{count_params(c):,}"} for k, c in cfgs.items()]
    _emit(rows, args.json, out)
    return EXIT_OK


def cmd_check(args, out) -> int:
    from .checks import run_checks

    results = run_checks()
    for r in results:
        out.write(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<16} {r.detail}\n")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "bench": cmd_bench, "pareto": cmd_pareto,
    "mfu": cmd_mfu, "cost": cmd_cost, "tokenize": cmd_tokenize, "count-params": cmd_count_params,
    "check": cmd_check,
}


def cli_main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args, out)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PackingError, CheckpointFormatError, IncompatibleCheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        ref = f" (last checkpoint: {e.last_checkpoint})" if e.last_checkpoint else ""
        print(f"diverged: {e}{ref}", file=sys.stderr)
        return EXIT_RUNTIME
    except MeasurementError as e:
        print(f"measurement error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
