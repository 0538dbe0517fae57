import json

import pytest

from mosaicbert.config import RunConfig, build_run_config, parse_override, resolve_run_config
from mosaicbert.errors import ConfigError
from mosaicbert.layers import preset


def test_paper_scale_recipe():
    cfg = build_run_config("mosaicbert-base", "paper")
    assert cfg.model == preset("mosaicbert-base")
    t = cfg.train
    assert (t.total_steps, t.batch_size, t.lr_peak, t.betas, t.eps, t.weight_decay) == (
        70_000, 4096, 5e-4, (0.9, 0.98), 1e-6, 1e-5)
    assert (t.warmup_fraction, t.final_lr_fraction, t.microbatch) == (0.06, 0.02, 512)
    assert build_run_config("mosaicbert-large").train.lr_peak == 2e-4
    assert cfg.model.mlm_ratio == 0.30 and build_run_config("bert-base").model.mlm_ratio == 0.15


@pytest.mark.parametrize("name", ["bert-base", "mosaicbert-base", "bert-large", "mosaicbert-large"])
def test_desk_scale_keeps_ratios(name):
    paper, desk = build_run_config(name, "paper"), build_run_config(name, "desk")
    assert desk.model.hidden < paper.model.hidden and desk.train.total_steps < paper.train.total_steps
    assert desk.train.warmup_fraction == paper.train.warmup_fraction
    assert desk.train.final_lr_fraction == paper.train.final_lr_fraction
    assert desk.model.mlm_ratio == paper.model.mlm_ratio
    assert desk.model.intermediate / desk.model.hidden == paper.model.intermediate / paper.model.hidden
    for flag in ("use_alibi", "use_geglu", "use_unpadding", "low_precision_ln"):
        assert getattr(desk.model, flag) == getattr(paper.model, flag)
    assert desk.model.vocab_size % 64 == 0


def test_json_roundtrip():
    cfg = build_run_config("bert-large", "desk", seed=9)
    text = cfg.to_json()
    back = RunConfig.from_json(text)
    assert back == cfg and back.to_json() == text


def test_strict_parsing():
    d = json.loads(build_run_config().to_json())
    d["model"]["hiden"] = 3
    with pytest.raises(ConfigError, match="hiden"):
        RunConfig.from_dict(d)
    d = json.loads(build_run_config().to_json())
    d["train"]["total_steps"] = "many"
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_overrides_and_precedence(tmp_path):
    assert parse_override("train.lr_peak=0.01") == (["train", "lr_peak"], 0.01)
    assert parse_override("out_dir=some/where") == (["out_dir"], "some/where")
    with pytest.raises(ConfigError):
        parse_override("novalue")
    f = tmp_path / "run.json"
    f.write_text(json.dumps({"scale": "desk", "train": {"total_steps": 50, "batch_size": 4}}))
    cfg = resolve_run_config(f, ["train.total_steps=7", "model.use_alibi=false"])
    assert cfg.scale == "desk" and cfg.train.total_steps == 7 and cfg.train.batch_size == 4
    assert cfg.model.use_alibi is False and cfg.model.hidden == 64
    with pytest.raises(ConfigError):
        resolve_run_config(None, ["model.nope=1"])
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        resolve_run_config(bad)


def test_seeded_propagates():
    cfg = build_run_config(seed=4)
    train, ft = cfg.seeded()
    assert train.seed == ft.seed == 4
