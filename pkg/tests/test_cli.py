import json

import numpy as np
import pytest

from gm3d.cli import run
from gm3d.data import load_pointcloud, write_xyz, synth_shape

TINY_CONFIG = {
    "seed": 5,
    "epochs": 2,
    "batch_size": 4,
    "bootstrap_epochs": 1,
    "loss_weights": {"warmup_epochs": 1},
    "curriculum": {"e_max": 2, "max_hard_ratio": 0.5},
    "model": {"embed_dim": 16, "encoder_depth": 1, "decoder_depth": 1, "heads": 2,
              "mlp_ratio": 2, "n_patches": 8, "patch_size": 4},
    "dataset": {"kind": "synthetic", "train_per_class": 2, "test_per_class": 1,
                "n_points": 64, "seed": 0, "jitter": 0.01},
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def test_unknown_flag_is_usage_error(capsys):
    assert run(["pretrain", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_is_usage_error(capsys):
    assert run(["frobnicate"]) == 1


def test_unknown_config_key_is_runtime_failure(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1.0}))
    assert run(["pretrain", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_pretrain_writes_artifacts(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["pretrain", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "checkpoint.gm3d").exists()
    assert (out / "bootstrap.gm3d").exists()
    csv = (out / "metrics.csv").read_text()
    assert csv.splitlines()[0] == "epoch,iter,l_gc,l_rec_p,l_rec_f,l_total,n_sel,lr,rank_corr"
    assert len(csv.splitlines()) == 1 + 2 * 2  # header + epochs * batches


def test_set_overrides_scalar_keys(config_file, tmp_path):
    out = tmp_path / "run"
    assert run(["pretrain", "--config", str(config_file), "--out", str(out),
                "--set", "epochs=1", "--set", "bootstrap_epochs=0"]) == 0
    csv = (out / "metrics.csv").read_text()
    assert len(csv.splitlines()) == 1 + 2


def test_set_rejects_nested_override(config_file, capsys):
    assert run(["pretrain", "--config", str(config_file),
                "--set", 'model={"embed_dim": 8}']) == 1


def test_bootstrap_subcommand(config_file, tmp_path, capsys):
    out = tmp_path / "boot"
    assert run(["bootstrap", "--config", str(config_file), "--out", str(out)]) == 0
    assert (out / "bootstrap.gm3d").exists()
    assert "bootstrap complete" in capsys.readouterr().out


def test_probe_prints_accuracy(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    run(["pretrain", "--config", str(config_file), "--out", str(out),
         "--set", "bootstrap_epochs=0"])
    data = tmp_path / "data.json"
    data.write_text(json.dumps(TINY_CONFIG["dataset"]))
    assert run(["probe", "--checkpoint", str(out / "checkpoint.gm3d"),
                "--data", str(data), "--epochs", "20"]) == 0
    out_text = capsys.readouterr().out
    line = [ln for ln in out_text.splitlines() if ln.startswith("accuracy=")]
    assert line and 0.0 <= float(line[0].split("=")[1]) <= 1.0


def test_gc_export_colors(config_file, tmp_path):
    out = tmp_path / "run"
    run(["pretrain", "--config", str(config_file), "--out", str(out),
         "--set", "bootstrap_epochs=0", "--set", "epochs=1"])
    shape = tmp_path / "shape.xyz"
    write_xyz(shape, synth_shape("torus", 64, seed=1))
    ply = tmp_path / "gc.ply"
    assert run(["gc-export", "--checkpoint", str(out / "checkpoint.gm3d"),
                "--input", str(shape), "--out", str(ply)]) == 0

    text = ply.read_text().splitlines()
    n_vertices = int(next(l for l in text if l.startswith("element vertex")).split()[-1])
    assert n_vertices == 8 * 4  # n_patches * patch_size
    body = text[text.index("end_header") + 1:]
    colors = np.array([[int(v) for v in ln.split()[3:6]] for ln in body])
    # per-object min-max normalization: extremes are pure red and pure blue
    assert [255, 0, 0] in colors.tolist()
    assert [0, 0, 255] in colors.tolist()
    assert np.all(colors[:, 1] == 0)
    assert np.all(colors[:, 0] + colors[:, 2] == 255)
    # vertices parse back as a cloud
    assert load_pointcloud(ply).n_points == n_vertices


def test_mask_demo_deterministic(capsys):
    assert run(["mask-demo", "--n", "16", "--ratio", "0.6", "--epoch", "30",
                "--e-max", "60", "--seed", "7"]) == 0
    first = capsys.readouterr().out
    assert "n_masked=10" in first and "n_sel=2" in first
    run(["mask-demo", "--n", "16", "--ratio", "0.6", "--epoch", "30",
         "--e-max", "60", "--seed", "7"])
    assert capsys.readouterr().out == first


def test_check_grad_passes(capsys):
    assert run(["check-grad"]) == 0
    assert "gradient check passed" in capsys.readouterr().out


def test_probe_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    assert run(["probe", "--checkpoint", str(tmp_path / "none.gm3d"),
                "--data", str(tmp_path / "none.json")]) == 2
