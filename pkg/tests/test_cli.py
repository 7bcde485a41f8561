"""End-to-end command-line tests: exit codes, outputs, determinism."""
import numpy as np
import pytest

from octseg.cli import main
from octseg.data import load_xyzl

CFG = """
input_points = 64
num_classes = 3
stage_sizes = 16, 8
stage_widths = 8, 16
input_width = 8
oe_radii = 0.3, 0.6
sa_radii = 0.4, 0.9
oe_dims = 8; 16
max_k = 32
learning_rate = 0.003
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "net.cfg"
    path.write_text(CFG)
    return str(path)


def gen(tmp_path, name="data", scenes=3, seed=2):
    out = tmp_path / name
    rc = main(["gen-data", "--out", str(out), "--scenes", str(scenes),
               "--points", "64", "--seed", str(seed), "--normalize"])
    assert rc == 0
    return out


def test_gen_data_writes_scenes_and_manifest(tmp_path):
    out = gen(tmp_path)
    files = sorted(out.glob("*.xyzl"))
    assert len(files) == 3
    manifest = (out / "manifest.csv").read_text().strip().split("\n")
    assert manifest[0] == "filename,seed,shape_kinds,scales"
    assert len(manifest) == 4
    cloud = load_xyzl(files[0])
    assert len(cloud) == 64


def test_gen_data_deterministic(tmp_path):
    a = gen(tmp_path, "a", seed=7)
    b = gen(tmp_path, "b", seed=7)
    for fa, fb in zip(sorted(a.iterdir()), sorted(b.iterdir())):
        assert fa.name == fb.name
        assert fa.read_bytes() == fb.read_bytes()


def test_gen_data_invalid_scale_range(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "x"),
               "--scale-min", "2.0", "--scale-max", "1.0"])
    assert rc == 2
    assert "scale range" in capsys.readouterr().err


def test_missing_required_flag():
    assert main(["train", "--data", "somewhere", "--epochs", "1"]) == 2


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 2


def test_train_eval_roundtrip(tmp_path, cfg, capsys):
    data = gen(tmp_path)
    ckpt = tmp_path / "model.ckpt"
    rc = main(["train", "--config", cfg, "--data", str(data),
               "--epochs", "3", "--out", str(ckpt)])
    assert rc == 0
    assert ckpt.exists()
    log = ckpt.with_suffix(".csv").read_text().strip().split("\n")
    assert log[0] == "epoch,step,loss,accuracy,miou"
    assert len(log) == 1 + 3 * 3  # three epochs, three scenes each
    metrics = tmp_path / "metrics.csv"
    rc = main(["eval", "--config", cfg, "--ckpt", str(ckpt),
               "--data", str(data), "--out", str(metrics)])
    assert rc == 0
    body = metrics.read_text()
    assert body.startswith("metric,value")
    assert "overall_accuracy" in body


def test_train_epochs_zero_saves_initial_params(tmp_path, cfg):
    data = gen(tmp_path)
    ckpt = tmp_path / "init.ckpt"
    rc = main(["train", "--config", cfg, "--data", str(data),
               "--epochs", "0", "--out", str(ckpt)])
    assert rc == 0
    log = ckpt.with_suffix(".csv").read_text().strip().split("\n")
    assert log == ["epoch,step,loss,accuracy,miou"]


def test_train_deterministic_byte_identical(tmp_path, cfg):
    data = gen(tmp_path)
    outs = []
    for name in ("one", "two"):
        ckpt = tmp_path / f"{name}.ckpt"
        rc = main(["train", "--config", cfg, "--data", str(data),
                   "--epochs", "2", "--out", str(ckpt), "--deterministic"])
        assert rc == 0
        outs.append((ckpt.read_bytes(), ckpt.with_suffix(".csv").read_bytes()))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_train_bad_config_exit_2(tmp_path, capsys):
    data = gen(tmp_path)
    bad = tmp_path / "bad.cfg"
    bad.write_text("input_points = sixty-four\n")
    rc = main(["train", "--config", str(bad), "--data", str(data),
               "--epochs", "1", "--out", str(tmp_path / "m.ckpt")])
    assert rc == 2
    assert "line 1" in capsys.readouterr().err


def test_train_empty_data_dir(tmp_path, cfg):
    empty = tmp_path / "empty"
    empty.mkdir()
    rc = main(["train", "--config", cfg, "--data", str(empty),
               "--epochs", "1", "--out", str(tmp_path / "m.ckpt")])
    assert rc == 2


def test_eval_missing_checkpoint(tmp_path, cfg):
    data = gen(tmp_path)
    rc = main(["eval", "--config", cfg, "--ckpt", str(tmp_path / "nope.ckpt"),
               "--data", str(data), "--out", str(tmp_path / "m.csv")])
    assert rc == 2


def test_eval_wrong_config_shape_mismatch(tmp_path, cfg, capsys):
    data = gen(tmp_path)
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", cfg, "--data", str(data),
                 "--epochs", "1", "--out", str(ckpt)]) == 0
    other = tmp_path / "other.cfg"
    other.write_text(CFG.replace("input_width = 8", "input_width = 4"))
    rc = main(["eval", "--config", str(other), "--ckpt", str(ckpt),
               "--data", str(data), "--out", str(tmp_path / "m.csv")])
    assert rc == 2
    assert "checkpoint" in capsys.readouterr().err


def test_gradcheck_ok(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    assert "max relative error" in capsys.readouterr().out
