import json

import numpy as np
import pytest
import yaml

from bccrn import config as C
from bccrn.cli import run
from bccrn.dsp import read_wav, write_wav


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    tree = C.load_config(path)
    assert tree == C.DEFAULTS
    w = C.loss_weights(tree)
    assert (w.alpha, w.beta, w.gamma, w.kappa) == (1.0, 10.0, 1.0, 10.0)
    t = C.train_config(tree)
    assert t.learning_rate == 1e-3 and t.patience == 3 and t.max_epochs == 100
    assert C.model_config(tree).encoder_channels == (32, 64, 128, 256, 256, 256)


def test_override_changes_only_that_key():
    tree = C.load_config(None, ["loss.beta=5"])
    assert tree["loss"]["beta"] == 5
    tree["loss"]["beta"] = C.DEFAULTS["loss"]["beta"]
    assert tree == C.DEFAULTS


def test_file_values_merge_over_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  batch_size: 4\nmodel:\n  preset: toy\n")
    tree = C.load_config(path)
    assert tree["train"]["batch_size"] == 4 and tree["train"]["patience"] == 3
    assert C.model_config(tree).encoder_channels == (8, 16, 32)


def test_errors_name_keys_and_are_exhaustive(tmp_path):
    with pytest.raises(C.ConfigError) as info:
        C.load_config(None, ["train.learning_rate=-0.001"])
    assert any("train.learning_rate" in p for p in info.value.problems)
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  learning_rate: -1\n  bogus: 2\nloss:\n  beta: nan\n")
    with pytest.raises(C.ConfigError) as info:
        C.load_config(path, ["nope.key=1"])
    text = "\n".join(info.value.problems)
    for key in ("train.learning_rate", "train.bogus", "loss.beta", "nope"):
        assert key in text
    with pytest.raises(C.ConfigError):
        C.load_config(None, ["seed"])


def test_dump_round_trips(tmp_path):
    tree = C.load_config(None, ["seed=9", "model.preset=toy"])
    path = tmp_path / "echo.yaml"
    path.write_text(C.dump_config(tree))
    assert C.load_config(path) == tree


def test_unknown_flag_fails_without_writing(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BCCRN_OUT", str(tmp_path / "out"))
    assert run(["synth", "--frobnicate"]) != 0
    assert run(["nonsense"]) != 0
    assert "usage" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    assert run(["synth", "--set", "train.learning_rate=-1"]) == 2
    assert not (tmp_path / "out").exists()


def test_gradcheck_command_exit_code(capsys):
    assert run(["gradcheck", "--component", "stft_istft", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "stft_istft" in out and "ok" in out
    assert run(["gradcheck", "--component", "no_such_op"]) == 1


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.yaml"
    cfg.write_text(yaml.safe_dump({
        "model": {"preset": "toy"},
        "train": {"max_epochs": 1, "batch_size": 2},
        "data": {"utterances": 6, "duration": 0.5, "noise_types": ["wgn"],
                 "splits": {"train": 3, "valid": 1, "test": 2}},
    }))
    out = root / "run"
    assert run(["synth", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert run(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    return root, cfg, out


def test_synth_and_train_write_artifacts(pipeline):
    _, _, out = pipeline
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert len(manifest["entries"]) == 6
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert echoed["seed"] == 3
    assert (out / "model.ckpt").stat().st_size > 0
    lines = (out / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["seed"] == 3


def test_enhance_keeps_shape_and_rate(pipeline, tmp_path):
    _, cfg, out = pipeline
    x = np.random.default_rng(0).uniform(-0.3, 0.3, (2, 7001))
    write_wav(tmp_path / "noisy.wav", x, 16000)
    code = run(["enhance", "--config", str(cfg), "--model", str(out / "model.ckpt"),
                "--in", str(tmp_path / "noisy.wav"), "--out", str(tmp_path / "clean.wav")])
    assert code == 0
    y, sr = read_wav(tmp_path / "clean.wav")
    assert sr == 16000 and y.shape == (2, 7001)
    write_wav(tmp_path / "mono.wav", x[0], 16000)
    assert run(["enhance", "--config", str(cfg), "--model", str(out / "model.ckpt"),
                "--in", str(tmp_path / "mono.wav"), "--out", str(tmp_path / "m.wav")]) == 1


def test_eval_and_plot(pipeline, tmp_path):
    _, cfg, out = pipeline
    e1, e2 = tmp_path / "m", tmp_path / "id"
    assert run(["eval", "--config", str(cfg), "--model", str(out / "model.ckpt"),
                "--data", str(out / "data" / "manifest.json"), "--out", str(e1)]) == 0
    assert run(["eval", "--config", str(cfg), "--model", "identity",
                "--data", str(out / "data" / "manifest.json"), "--out", str(e2)]) == 0
    report = json.loads((e2 / "eval" / "report.json").read_text())
    assert len(report["records"]) == 2
    assert all(abs(r["delta_fwsegsnr_l"]) < 1e-6 for r in report["records"])
    plots = tmp_path / "plots"
    assert run(["plot", "--report", f"model={e1 / 'eval'}", "--report", f"identity={e2 / 'eval'}",
                "--out", str(plots)]) == 0
    assert sorted(p.name for p in plots.iterdir()) == ["fwsegsnr.svg", "ild.svg", "ipd.svg", "stoi.svg"]
    assert run(["plot", "--report", "nolabel", "--out", str(plots)]) == 1
