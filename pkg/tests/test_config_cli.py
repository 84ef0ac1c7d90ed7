import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from zipenhancer import checkpoint as ck
from zipenhancer import dsp
from zipenhancer.cli import EXIT_USAGE, main
from zipenhancer.config import (DEFAULT_STFT, PRESET_TABLE, TINY_STFT, build_run_config, load_run_config,
                                parse_config_text, preset)

SMALL = ["--preset", "S-tiny", "--steps", "3", "--threads", "1",
         "--set", "train.batch_size=1", "--set", "train.segment_seconds=0.1",
         "--set", "data.n_pairs=2", "--set", "data.duration_s=0.25",
         "--set", "train.checkpoint_every=2"]


def test_preset_table():
    s = preset("S")
    assert (s.n_stacks, s.ratios, s.channels, s.heads) == (4, (1, 2, 2, 1), 64, 4)
    assert (s.ffn_hidden, s.attn_head_dim, s.conv_kernel) == (192, 16, 15)
    assert preset("S8").ratios == (3, 6, 8, 3)
    m = preset("M")
    assert (m.n_stacks, m.channels, m.heads, len(m.ratios)) == (6, 128, 8, 6)
    assert set(PRESET_TABLE) >= {"S", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "M", "S-tiny"}
    with pytest.raises(KeyError, match="unknown preset"):
        preset("XL")


def test_parse_config_text():
    text = "# comment\nmodel.preset = S3   # trailing\n\ntrain.steps=10\ntrain.steps = 20\n"
    assert parse_config_text(text) == {"model.preset": "S3", "train.steps": "20"}
    with pytest.raises(ValueError, match="line 1"):
        parse_config_text("no equals sign")
    with pytest.raises(ValueError, match="section"):
        parse_config_text("steps = 3")


def test_build_run_config_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("model.preset = S-tiny\ntrain.steps = 7\ntrain.f64_checkpoint = yes\n")
    cfg = load_run_config(path, {"train.steps": "9", "loss.pha": "0.5"})
    assert cfg.train.steps == 9 and cfg.train.f64_checkpoint is True
    assert cfg.loss.pha == 0.5
    assert cfg.stft == TINY_STFT and cfg.model.name == "S-tiny"
    wide = build_run_config({"model.preset": "S", "model.channels": "32"})
    assert wide.model.name == "custom" and wide.model.ffn_hidden == 96 and wide.stft == DEFAULT_STFT
    assert build_run_config({"model.ratios": "1,2"}).model.n_stacks == 2
    with pytest.raises(KeyError, match="unknown config key"):
        build_run_config({"train.nope": "1"})
    with pytest.raises(ValueError):
        build_run_config({"train.f64_checkpoint": "maybe"})


def test_config_dict_round_trip():
    from zipenhancer.config import RunConfig
    cfg = build_run_config({"model.preset": "S5", "train.seed": "4"})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_profile_all_presets(tmp_path, capsys):
    assert main(["profile", "--all-presets", "--duration", "2", "--out", str(tmp_path / "p.csv")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[0] == "Model"
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["Model"] for r in rows] == ["S", "S2", "S3", "S4", "S5", "S6", "S7", "S8"]


def test_profile_breakdown(capsys):
    assert main(["profile", "--preset", "S", "--breakdown"]) == 0
    assert "stack1.sampling" in capsys.readouterr().out


def test_train_missing_checkpoint_dir(tmp_path):
    missing = tmp_path / "absent"
    assert main(["train", *SMALL, "--checkpoint-dir", str(missing)]) == EXIT_USAGE
    assert not missing.exists()
    assert list(tmp_path.iterdir()) == []


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["train", *SMALL, "--checkpoint-dir", str(d)]) == 0
    return d


def test_train_outputs(run_dir):
    names = sorted(p.name for p in run_dir.iterdir())
    assert names == ["config.json", "latest.ckpt", "metrics.csv", "step_0000002.ckpt", "step_0000003.ckpt"]
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert all(np.isfinite(float(r["loss_total"])) for r in rows)
    c = ck.load(run_dir / "latest.ckpt")
    assert c.step == 3 and c.config["model"]["name"] == "S-tiny"


def _same_weights(a, b):
    # configs differ in checkpoint_dir, so compare the payload only
    ca, cb = ck.load(a), ck.load(b)
    assert ca.step == cb.step and ca.tensors.keys() == cb.tensors.keys()
    assert all(ca.tensors[k].tobytes() == cb.tensors[k].tobytes() for k in ca.tensors)


def test_train_is_deterministic(run_dir, tmp_path):
    assert main(["train", *SMALL, "--checkpoint-dir", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    _same_weights(tmp_path / "latest.ckpt", run_dir / "latest.ckpt")


def test_train_resume_matches_uninterrupted(tmp_path):
    # exact resume needs the 64-bit checkpoint when training runs in float64
    (tmp_path / "full").mkdir()
    (tmp_path / "split").mkdir()
    assert main(["train", *SMALL, "--f64-checkpoint", "--checkpoint-dir", str(tmp_path / "full")]) == 0
    args = ["train", *SMALL, "--f64-checkpoint", "--checkpoint-dir", str(tmp_path / "split")]
    args[args.index("--steps") + 1] = "2"
    assert main(args) == 0
    last = str(tmp_path / "split" / "latest.ckpt")
    assert main([*args, "--resume", last, "--steps", "3", "--total-steps"]) == 0
    _same_weights(tmp_path / "split" / "latest.ckpt", tmp_path / "full" / "latest.ckpt")
    split = (tmp_path / "split" / "metrics.csv").read_bytes()
    assert split == (tmp_path / "full" / "metrics.csv").read_bytes()


def test_enhance_and_eval(run_dir, tmp_path, capsys):
    rng = np.random.default_rng(5)
    noisy = tmp_path / "noisy"
    noisy.mkdir()
    for i, n in enumerate([1600, 3333]):
        dsp.write_wav(noisy / f"u{i}.wav", dsp.Waveform(0.3 * rng.uniform(-1, 1, n)))
    ckpt = str(run_dir / "latest.ckpt")
    for out in ("e1", "e2"):
        assert main(["enhance", ckpt, str(noisy), "--out", str(tmp_path / out)]) == 0
    for name, n in (("u0.wav", 1600), ("u1.wav", 3333)):
        a = (tmp_path / "e1" / name).read_bytes()
        assert a == (tmp_path / "e2" / name).read_bytes()
        assert len(dsp.read_wav(tmp_path / "e1" / name)) == n
    assert main(["eval", str(noisy), str(noisy), "--out", str(tmp_path / "m.csv")]) == 0
    assert "MEAN" in capsys.readouterr().out
    assert main(["eval", str(noisy), str(tmp_path / "e1")]) == 0
    assert main(["enhance", ckpt, str(noisy / "u0.wav")]) == 0
    assert (noisy / "u0_enhanced.wav").exists()


def test_enhance_missing_input(run_dir, tmp_path):
    assert main(["enhance", str(run_dir / "latest.ckpt"), str(tmp_path / "none.wav")]) == EXIT_USAGE


def test_module_entry_and_log_level():
    env = {**os.environ, "ZIPENH_LOG": "error"}
    res = subprocess.run([sys.executable, "-m", "zipenhancer", "profile", "--preset", "S2"],
                         capture_output=True, text=True, env=env, timeout=120)
    assert res.returncode == 0 and "S2" in res.stdout and res.stderr == ""
    env["ZIPENH_LOG"] = "loud"
    res = subprocess.run([sys.executable, "-m", "zipenhancer", "profile"], capture_output=True,
                         text=True, env=env, timeout=120)
    assert res.returncode != 0 and "ZIPENH_LOG" in res.stderr
