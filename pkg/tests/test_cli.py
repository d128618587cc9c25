import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from textcue.audio import AudioSignal, write_wav
from textcue.cli import main
from textcue.config import CONFIG_ENV, ConfigError, apply_override, load_config
from textcue.corpus import read_manifest

TINY = [
    "--set", "corpus.examples={train: 8, valid: 4, test: 4}",
    "--set", "corpus.speakers={train: 4, valid: 2, test: 2}",
    "--set", "tpe.model={D: 16, B: 8, hidden: 8, L: 40, R: 1, K: 20, N: 1, emb_dim: 512}",
    "--set", "dprnn.model={I: 2, D: 16, B: 8, hidden: 8, L: 40, R: 1, K: 20}",
    "--set", "tsr.model={dim: 512, hidden: 32, attn_dim: 512, heads: 1}",
    "--set", "tpe.train.max_epochs=1", "--set", "dprnn.train.max_epochs=1",
    "--set", "tsr.train.max_epochs=1",
]


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run_json(argv, capsys) -> dict:
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny corpus plus one checkpoint of each kind, all made through the CLI."""
    w = tmp_path_factory.mktemp("cli")
    assert main(["generate-corpus", "--out", str(w / "corpus"), "--seed", "7"] + TINY) == 0
    for kind in ("tpe", "dprnn", "tsr"):
        assert main([f"train-{kind}", "--corpus", str(w / "corpus"), "--out", str(w / kind)] + TINY) == 0
    return w


def test_generate_corpus_is_deterministic(tmp_path, workspace):
    assert main(["generate-corpus", "--out", str(tmp_path / "b"), "--seed", "7"] + TINY) == 0
    a, b = tree_digest(workspace / "corpus"), tree_digest(tmp_path / "b")
    assert a == b and "manifest.jsonl" in a and "resolved_config.yaml" in a


def test_training_outputs_and_snapshot(workspace):
    for kind in ("tpe", "dprnn", "tsr"):
        d = workspace / kind
        assert (d / "best.ckpt").exists() and (d / "train_log.csv").exists()
        snap = yaml.safe_load((d / "resolved_config.yaml").read_text())
        assert snap["command"] == f"train-{kind}" and snap[kind]["train"]["max_epochs"] == 1


def test_evaluate_then_report(workspace, tmp_path, capsys):
    corpus = workspace / "corpus"
    before = tree_digest(corpus)
    rep = tmp_path / "tpe.json"
    out = run_json(["evaluate", "--corpus", str(corpus), "--mode", "tpe",
                    "--checkpoint", str(workspace / "tpe" / "best.ckpt"), "--out", str(rep)], capsys)
    assert out["n"] == 4 and rep.with_suffix(".csv").exists()
    rnd = tmp_path / "random.json"
    run_json(["evaluate", "--corpus", str(corpus), "--mode", "random",
              "--separator", str(workspace / "dprnn" / "best.ckpt"), "--out", str(rnd)], capsys)
    tsr = tmp_path / "tsr.json"
    run_json(["evaluate", "--corpus", str(corpus), "--mode", "dprnn_tsr",
              "--separator", str(workspace / "dprnn" / "best.ckpt"),
              "--matcher", str(workspace / "tsr" / "best.ckpt"), "--out", str(tsr)], capsys)
    out = run_json(["report", "--reports", str(rep), str(rnd), str(tsr), "--out", str(tmp_path / "fig")], capsys)
    n_test = len(read_manifest(corpus / "manifest.jsonl", "test"))
    assert out["histogram_total"] == [n_test] * 3
    curves = json.loads((tmp_path / "fig" / "curves.json").read_text())
    assert [sum(c["histogram"]["counts"]) for c in curves] == [n_test] * 3
    for name in ("si_sdri_histogram.png", "si_sdri_vs_sdr.png", "accuracy_vs_sdr.png", "curves.csv"):
        assert (tmp_path / "fig" / name).exists()
    assert (tmp_path / "tpe.config.yaml").exists()
    assert tree_digest(corpus) == before


def test_evaluate_is_byte_identical(workspace, tmp_path):
    args = ["evaluate", "--corpus", str(workspace / "corpus"), "--mode", "random",
            "--separator", str(workspace / "dprnn" / "best.ckpt"), "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_extract_with_reference_writes_sidecar(workspace, tmp_path, capsys):
    rec = read_manifest(workspace / "corpus" / "manifest.jsonl", "test")[0]
    mix = workspace / "corpus" / rec["mixture_path"]
    ref = workspace / "corpus" / rec["target_path"]
    digest = hashlib.sha256(mix.read_bytes()).hexdigest()
    out = tmp_path / "est.wav"
    side = run_json(["extract", "--mixture", str(mix), "--prompt", rec["prompt"],
                     "--checkpoint", str(workspace / "tpe" / "best.ckpt"),
                     "--reference", str(ref), "--out", str(out)], capsys)
    assert out.exists() and "si_sdr" in side and "sdr" in side
    assert json.loads(out.with_suffix(".json").read_text()) == side
    assert (tmp_path / "est.config.yaml").exists()
    assert hashlib.sha256(mix.read_bytes()).hexdigest() == digest
    side2 = run_json(["extract", "--mixture", str(mix), "--prompt", rec["prompt"],
                      "--checkpoint", str(workspace / "tpe" / "best.ckpt"),
                      "--out", str(tmp_path / "b.wav")], capsys)
    assert "si_sdr" not in side2
    assert out.read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_separate_then_match(workspace, tmp_path, capsys):
    rec = read_manifest(workspace / "corpus" / "manifest.jsonl", "test")[0]
    mix = workspace / "corpus" / rec["mixture_path"]
    out = run_json(["separate", "--mixture", str(mix), "--checkpoint", str(workspace / "dprnn" / "best.ckpt"),
                    "--out", str(tmp_path / "streams")], capsys)
    assert len(out["streams"]) == 2
    m = run_json(["match", "--prompt", rec["prompt"], "--streams", str(tmp_path / "streams"),
                  "--checkpoint", str(workspace / "tsr" / "best.ckpt")], capsys)
    assert m["index"] in (0, 1) and abs(sum(m["probabilities"]) - 1) < 1e-5


def test_exit_code_usage(capsys):
    assert main(["no-such-command"]) == 2
    assert main(["generate-corpus", "--out", "x", "--bogus"]) == 2
    assert main(["generate-corpus", "--out", "x", "--workers", "0"]) == 2
    capsys.readouterr()


def test_exit_code_data(tmp_path, capsys):
    assert main(["train-tpe", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "data"
    assert main(["generate-corpus", "--out", str(tmp_path / "c"), "--set", "corpus.nope=1"]) == 3
    write_wav(AudioSignal(np.zeros(800), 8000), tmp_path / "m.wav")
    assert main(["extract", "--mixture", str(tmp_path / "m.wav"), "--prompt", "x",
                 "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "e.wav")]) == 3


def test_exit_code_numeric(workspace, tmp_path, monkeypatch, capsys):
    import textcue.trainer as T
    monkeypatch.setattr(T, "neg_si_sdr", lambda est, ref: est.sum() * float("nan"))
    code = main(["train-tpe", "--corpus", str(workspace / "corpus"), "--out", str(tmp_path / "o")] + TINY)
    assert code == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "numeric"


def test_config_file_env_and_overrides(tmp_path, monkeypatch):
    f = tmp_path / "c.yaml"
    f.write_text("seed: 5\ntpe:\n  train:\n    max_epochs: 3\n")
    assert load_config(f)["seed"] == 5
    monkeypatch.setenv(CONFIG_ENV, str(f))
    cfg = load_config(overrides=["tpe.train.max_epochs=9"])
    assert cfg["seed"] == 5 and cfg["tpe"]["train"]["max_epochs"] == 9
    with pytest.raises(ConfigError):
        apply_override(cfg, "tpe.train.bogus=1")
    with pytest.raises(ConfigError):
        apply_override(cfg, "novalue")
