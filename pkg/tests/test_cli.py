import io
import json
import subprocess
import sys

import numpy as np
import pytest

from mosaicbert.cli import cli_main
from mosaicbert.train import load_checkpoint

DESK = ["--scale", "desk", "--set", "train.total_steps=12", "--set", "train.eval_every=4",
        "--set", "train.checkpoint_every=6", "--set", "data.synthetic_docs=20"]


def run(*argv):
    out = io.StringIO()
    code = cli_main(list(argv), out)
    return code, out.getvalue()


def test_count_params():
    code, text = run("count-params", "--preset", "mosaicbert-base")
    assert code == 0
    n = int(text.split()[-1].replace(",", ""))
    assert abs(n - 137_000_000) <= 0.01 * 137_000_000
    code, text = run("count-params", "--json")
    rows = json.loads(text)
    assert {r["model"] for r in rows} == {"bert-base", "mosaicbert-base", "bert-large", "mosaicbert-large"}


def test_mfu():
    code, text = run("mfu", "--params", "110e6", "--tps", "0.4e6", "--devices", "8", "--peak", "312e12")
    assert code == 0 and "10.6%" in text
    code, text = run("mfu", "--params", "110e6", "--tps", "0.4e6", "--devices", "8", "--json")
    assert json.loads(text)["mfu"] == "10.6%"


def test_cost():
    code, text = run("cost", "--hours", "1.13", "--devices", "8", "--price", "2.50")
    assert code == 0 and "$22.60" in text
    code, text = run("cost", "--hours", "1.13", "2.81", "5.27", "--devices", "8", "--price", "2.50", "--json")
    assert [r["cost"] for r in json.loads(text)] == ["$22.60", "$56.20", "$105.40"]


@pytest.mark.parametrize("argv,code", [
    ([], 1),
    (["frobnicate"], 1),
    (["cost", "--hours", "1"], 1),
    (["mfu", "--tps", "1", "--devices", "1"], 1),
    (["mfu", "--params", "1", "--tps", "1", "--devices", "0"], 1),
    (["pretrain", "--set", "model.nope=1", "--dump-config"], 1),
    (["tokenize", "--corpus", "/nonexistent/corpus.txt", "--text", "x"], 2),
    (["finetune", "--checkpoint", "/nonexistent.bin"], 2),
])
def test_exit_codes(argv, code, capsys):
    assert run(*argv)[0] == code
    assert capsys.readouterr().err


def test_bad_checkpoint_is_a_data_error(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert run("finetune", "--checkpoint", str(bad))[0] == 2


def test_dump_config_roundtrip(tmp_path):
    code, text = run("pretrain", "--preset", "bert-large", "--scale", "desk", "--seed", "5",
                     "--set", "train.lr_peak=0.002", "--dump-config")
    assert code == 0
    f = tmp_path / "cfg.json"
    f.write_text(text)
    code, again = run("pretrain", "--config", str(f), "--dump-config")
    assert again == text
    d = json.loads(text)
    assert d["seed"] == d["train"]["seed"] == d["finetune"]["seed"] == 5
    assert d["train"]["lr_peak"] == 0.002 and d["preset"] == "bert-large"


def test_seed_environment_fallback(monkeypatch):
    monkeypatch.setenv("MOSAIC_SEED", "31")
    assert json.loads(run("pretrain", "--dump-config")[1])["seed"] == 31
    assert json.loads(run("pretrain", "--seed", "2", "--dump-config")[1])["seed"] == 2
    monkeypatch.setenv("MOSAIC_SEED", "x")
    assert run("pretrain", "--dump-config")[0] == 1


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    outs = []
    for name in ("a", "b"):
        code, text = run("pretrain", *DESK, "--seed", "1", "--no-timing", "--out", str(root / name))
        assert code == 0, text
        outs.append(root / name)
    return outs


def test_pretrain_outputs_are_reproducible(desk_runs):
    a, b = desk_runs
    for name in ("metrics.csv", "vocab.txt", "config.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    # checkpoints carry wallclock in their metrics tail; the arrays must match
    ca, cb = load_checkpoint(a / "final.bin"), load_checkpoint(b / "final.bin")
    assert ca.arrays.keys() == cb.arrays.keys()
    assert all(np.array_equal(ca.arrays[k], cb.arrays[k]) for k in ca.arrays)
    lines = (a / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,wallclock_s,tokens_seen,mlm_loss,eval_metric"
    assert [line.split(",")[0] for line in lines[1:]] == ["4", "8", "12"]
    assert all(line.split(",")[1] == "" for line in lines[1:])
    assert (a / "ckpt_step000006.bin").exists() and (a / "ckpt_step000012.bin").exists()


def test_finetune_and_pareto(desk_runs, tmp_path, capsys):
    a, b = desk_runs
    code, text = run("finetune", "--scale", "desk", "--set", "finetune.steps=10", "--checkpoint",
                     str(a / "final.bin"), "--task-size", "64", "--seq-len", "48", "--out", str(tmp_path / "ft"),
                     "--no-timing")
    assert code == 0 and text.startswith("accuracy")
    code, text = run("finetune", "--scale", "desk", "--set", "finetune.steps=2", "--checkpoint",
                     str(a / "final.bin"), "--chain-from", str(tmp_path / "ft" / "finetuned.bin"),
                     "--task-size", "16", "--out", str(tmp_path / "ft2"))
    assert code == 0
    code, csv_a = run("pareto", str(a / "metrics.csv"), str(b / "metrics.csv"))
    assert code == 0
    assert csv_a.splitlines()[0] == "run_id,step,wallclock_hours,metric,on_front"
    assert "no wallclock" in capsys.readouterr().err
    assert {line.split(",")[0] for line in csv_a.splitlines()[1:]} == {"a/metrics", "b/metrics"}
    code, csv_b = run("pareto", str(a / "metrics.csv"), str(b / "metrics.csv"))
    assert csv_a == csv_b
    assert run("pareto", str(a / "metrics.csv"), "--metric", "accuracy")[0] == 1


def test_finetune_task_file(desk_runs, tmp_path):
    a, _ = desk_runs
    task = tmp_path / "task.tsv"
    task.write_text("1\tgailaitrou voba gura\n0\ttroumesha tiru\n1\tvoba voba\n0\tnivo\n")
    code, _ = run("finetune", "--scale", "desk", "--set", "finetune.steps=2", "--set", "finetune.batch_size=2",
                  "--checkpoint", str(a / "final.bin"), "--task-file", str(task), "--out", str(tmp_path / "o"))
    assert code == 0
    bad = tmp_path / "bad.tsv"
    bad.write_text("no tab here\n")
    assert run("finetune", "--checkpoint", str(a / "final.bin"), "--task-file", str(bad))[0] == 2


def test_resume_via_cli(desk_runs, tmp_path):
    a, _ = desk_runs
    code, _ = run("pretrain", *DESK, "--seed", "1", "--no-timing", "--out", str(tmp_path),
                  "--resume", str(a / "ckpt_step000006.bin"))
    assert code == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()


def test_tokenize(desk_runs):
    a, _ = desk_runs
    words = [t for t in (a / "vocab.txt").read_text().splitlines() if len(t) > 3 and t.isalpha()][:2]
    code, text = run("tokenize", "--vocab", str(a / "vocab.txt"), "--text", f"{words[0]} {words[1].upper()}.",
                     "--tokens")
    assert code == 0 and text.split() == [*words, "."]
    code, ids = run("tokenize", "--vocab", str(a / "vocab.txt"), "--text", "qqq")
    assert ids.split() == ["1"]


def test_bench_smoke():
    code, text = run("bench", "--scale", "desk", "--set", "bench.n_trials=1", "--set", "bench.warmup_trials=0",
                     "--set", "bench.batch_size=4", "--json")
    assert code == 0
    padded, unpadded = json.loads(text)
    assert padded["ff_multiplies"] == 2 * unpadded["ff_multiplies"]


def test_check_command():
    code, text = run("check")
    assert code == 0
    assert text.count("PASS") == len(text.splitlines()) >= 9


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mosaicbert", "cost", "--hours", "5.27", "--devices", "8",
                           "--price", "2.50"], capture_output=True, text=True)
    assert proc.returncode == 0 and "$105.40" in proc.stdout
