import json
import os
import subprocess
import sys

import pytest

from ssrcap.cli import main

TINY = [
    "n_train=60", "n_val=16", "n_test=16", "n_lm=120", "feat_dim=8", "embed_dim=12", "hidden_dim=12",
    "gru_hidden=12", "joint_dim_sentence=12", "joint_dim_concept=8", "epochs_lm=2", "epochs_captioner=3",
    "vse_epochs=2", "rl_epochs=2", "batch_pretrain=32", "batch_rl=16", "vocab_threshold=1",
    "modes=baseline,ablation:flc,ssr",
]


def tiny_args():
    return sum((["--set", kv] for kv in TINY), [])


def snapshot(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    out = base / "out"
    cwd = os.getcwd()
    os.chdir(base)
    try:
        assert main(["pretrain", "--out", str(out), "--seed", "2", *tiny_args()]) == 0
        assert main(["train-ssr", "--out", str(out), "--mode", "all"]) == 0
        assert main(["report", "--out", str(out)]) == 0
    finally:
        os.chdir(cwd)
    return base, out


def test_layout(run_dir):
    base, out = run_dir
    assert sorted(os.listdir(base)) == ["out"]
    for rel in ("config.cfg", "data/train.jsonl", "data/world.json", "checkpoints/lm.ckpt", "checkpoints/vse_sent.ckpt",
                "checkpoints/captioner_pretrained.ckpt", "checkpoints/vocab.txt", "checkpoints/concepts.tsv",
                "modes/ssr/captioner.ckpt", "modes/ssr/report.txt", "modes/ssr/items.jsonl", "modes/ssr/log.jsonl",
                "modes/ablation_flc/report.txt", "modes/baseline/report.txt", "report.txt", "report.jsonl"):
        assert (out / rel).exists(), rel


def test_report_rows_and_idempotence(run_dir, capsys):
    _, out = run_dir
    rows = [json.loads(x) for x in (out / "report.jsonl").read_text().splitlines()]
    assert [r["mode"] for r in rows] == ["baseline", "ablation:flc", "ssr"]
    assert all("cider" in r and "mean_r_flc" in r for r in rows)
    before = snapshot(out)
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert snapshot(out) == before
    assert "ssr" in capsys.readouterr().out


def test_generate_and_evaluate(run_dir, capsys):
    _, out = run_dir
    capsys.readouterr()
    assert main(["generate", "--out", str(out), "--mode", "ssr", "--image-id", "test-00003", "--beam", "3"]) == 0
    line = capsys.readouterr().out.strip()
    vocab = set((out / "checkpoints" / "vocab.txt").read_text().split())
    assert line and set(line.split()) <= vocab
    assert main(["evaluate", "--out", str(out), "--mode", "baseline", "--beam", "2"]) == 0
    assert "cider:" in capsys.readouterr().out


def test_runtime_errors_exit_2(run_dir, capsys):
    _, out = run_dir
    assert main(["generate", "--out", str(out), "--mode", "ssr", "--image-id", "nope"]) == 2
    assert main(["generate", "--out", str(out), "--mode", "ablation:none", "--image-id", "test-00000"]) == 2
    assert main(["report", "--out", str(out), "--mode", "ablation:none"]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_pretraining_is_a_runtime_error(tmp_path, capsys):
    assert main(["train-ssr", "--out", str(tmp_path / "empty"), "--mode", "ssr"]) == 2
    assert "pretrain" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        ["train-ssr", "--mode", "nonsense"],
        ["pretrain", "--set", "hidden_dim"],
        ["pretrain", "--set", "no_key=1"],
        ["pretrain", "--disfluency", "2"],
        ["pretrain", "--config", "/nonexistent.cfg"],
        ["generate"],
    ],
)
def test_usage_errors_exit_1(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path / "o")]) == 1
    assert "usage:" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--out", os.devnull]) == 0
    out = capsys.readouterr().out
    assert "lstm_cell" in out and "below 0.0001" in out


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "ssrcap", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("make-dataset", "train-ssr", "gradcheck", "report"):
        assert cmd in r.stdout
