"""Run configuration: one JSON document describing a whole experiment.

Parsing is strict (unknown keys are errors) and every field is written out
on dump, so a dumped config re-parses to an identical run.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .layers import EncoderConfig, preset
from .train.loop import FinetuneConfig, TrainConfig

SCALES = ("paper", "desk")


@dataclass
class DataConfig:
    corpus: str | None = None  # file or directory of .txt shards; None = synthetic
    vocab: str | None = None  # vocab file; None = built from the corpus
    synthetic_docs: int = 50
    lowercase: bool = True
    vocab_multiple: int = 64


@dataclass
class BenchConfig:
    batch_size: int = 8
    seq_len: int = 128
    pad_fraction: float = 0.5
    n_trials: int = 5
    warmup_trials: int = 1
    n_devices: int = 8
    peak_flops_per_device: float = 312e12
    price_per_device_hour: float = 2.50


@dataclass
class RunConfig:
    preset: str = "mosaicbert-base"
    scale: str = "paper"
    seed: int = 0
    out_dir: str = "runs"
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}, got {self.scale!r}")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def seeded(self) -> tuple[TrainConfig, FinetuneConfig]:
        """Train and finetune settings with the run seed applied."""
        return (dataclasses.replace(self.train, seed=self.seed),
                dataclasses.replace(self.finetune, seed=self.seed))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, d: Any, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {unknown}")
    kwargs = {}
    for key, value in d.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    return cls(**kwargs)


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{where} must be a list of {len(args)} values")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


# -- presets ---------------------------------------------------------------

# pretraining recipe per preset: (lr_peak, microbatch)
_RECIPES = {
    "bert-base": (5e-4, 512),
    "mosaicbert-base": (5e-4, 512),
    "bert-large": (2e-4, 256),
    "mosaicbert-large": (2e-4, 256),
}


def build_run_config(preset_name: str = "mosaicbert-base", scale: str = "paper", seed: int = 0) -> RunConfig:
    """Defaults for a preset at full published size ("paper"), or shrunk to laptop size ("desk").

    Desk scale shrinks widths, depth, vocabulary, sequence length and step
    count; warmup fraction, final-lr fraction and masking ratio are kept.
    """
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    model = preset(preset_name)
    lr, micro = _RECIPES[preset_name]
    train = TrainConfig(total_steps=70_000, batch_size=4096, microbatch=micro, lr_peak=lr, eval_every=2000,
                        checkpoint_every=3500, run_id=preset_name)
    finetune = FinetuneConfig(steps=1000, batch_size=32, lr_peak=5e-5, weight_decay=5e-6)
    bench = BenchConfig()
    if scale == "desk":
        hidden = max(32, round(model.hidden / 12 / 16) * 16)
        ratio = model.intermediate // model.hidden
        model = model.replace(hidden=hidden, n_heads=2, n_layers=max(2, model.n_layers // 6),
                              intermediate=ratio * hidden, vocab_size=512, max_seq_len=32, key_block=16)
        train = dataclasses.replace(train, total_steps=200, batch_size=16, microbatch=None, lr_peak=1e-3,
                                    eval_every=10, checkpoint_every=50)
        finetune = dataclasses.replace(finetune, steps=100, batch_size=16, lr_peak=1e-3)
        bench = dataclasses.replace(bench, batch_size=8, seq_len=32, n_trials=3, n_devices=1)
    return RunConfig(preset_name, scale, seed, "runs", model, train, finetune, DataConfig(), bench)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is parsed as JSON, falling back to a string."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def resolve_run_config(config_file: str | Path | None = None, overrides: list[str] = (),
                       preset_name: str | None = None, scale: str | None = None) -> RunConfig:
    """Preset defaults, then the JSON file, then ``--set`` overrides."""
    layers: list[dict] = []
    if config_file is not None:
        try:
            text = Path(config_file).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {config_file}: {e}") from e
        try:
            layers.append(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {config_file} is not valid JSON: {e}") from e
    sets: dict = {}
    for item in overrides:
        keys, value = parse_override(item)
        node = sets
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    layers.append(sets)
    merged: dict = {}
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("config must be a JSON object")
        merged = _merge(merged, layer)
    name = preset_name or merged.get("preset", "mosaicbert-base")
    sc = scale or merged.get("scale", "paper")
    if not isinstance(name, str) or not isinstance(sc, str):
        raise ConfigError("preset and scale must be strings")
    base = build_run_config(name, sc).to_dict()
    merged["preset"], merged["scale"] = name, sc
    return RunConfig.from_dict(_merge(base, merged))
