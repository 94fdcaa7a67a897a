import json

import jsonschema
import numpy as np
import pytest
import yaml
from PIL import Image

from conftest import square_mask
from cotsnets.cli import main
from cotsnets.config import ConfigError, load_run_config, schema
from cotsnets.geometry import boundary_map
from cotsnets.metrics import REPORT_SCHEMA

TINY_TRAIN = {"input_size": [32, 32], "batch_size": 2, "epochs": 2, "augmentation": False,
              "checkpoint_every": 1, "model": {"num_stages": 2, "stage_channels": [8, 16]}}


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    for style, name in (("blob_texture", "src"), ("ellipse_speckle", "tgt")):
        assert main(["gen-synth", "--style", style, "--n", "4", "--size", "32", "--out", str(root / name)]) == 0
    return root


def write_config(path, synth, **train):
    cfg = {"train": {**TINY_TRAIN, **train}, "source": {"root": str(synth / "src")},
           "target": {"root": str(synth / "tgt")}, "output_dir": "run"}
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def trained(synth, tmp_path_factory):
    work = tmp_path_factory.mktemp("train")
    cfg = write_config(work / "run.yaml", synth)
    assert main(["train", "--config", str(cfg), "--override", "epochs=1"]) == 0
    return work / "run"


def test_gen_synth_layout_and_determinism(synth, tmp_path):
    imgs = sorted(p.name for p in (synth / "src" / "images").iterdir())
    masks = sorted(p.name for p in (synth / "src" / "masks").iterdir())
    assert imgs == masks and len(imgs) == 4
    assert main(["gen-synth", "--style", "blob_texture", "--n", "4", "--size", "32", "--out",
                 str(tmp_path / "again")]) == 0
    for name in imgs:
        a = np.asarray(Image.open(synth / "src" / "images" / name))
        b = np.asarray(Image.open(tmp_path / "again" / "images" / name))
        assert np.array_equal(a, b)
    m = np.asarray(Image.open(synth / "src" / "masks" / imgs[0]))
    assert set(np.unique(m)) <= {0, 255}


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, synth, capsys):
    cfg = write_config(tmp_path / "c.yaml", synth, learning_rate=1.0)
    assert main(["train", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_paths_resolve_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    p = tmp_path / "sub" / "c.yaml"
    p.write_text(yaml.safe_dump({"source": {"root": "../data/s"}, "output_dir": "out"}))
    run = load_run_config(p)
    assert run.source.root == str((tmp_path / "data" / "s").resolve())
    assert run.output_dir == str((tmp_path / "sub" / "out").resolve())
    with pytest.raises(ConfigError):
        load_run_config(p, ["epochs"])


def test_override_epochs_gives_one_epoch(trained):
    lines = [json.loads(x) for x in (trained / "train_log.jsonl").read_text().splitlines()]
    assert {r["epoch"] for r in lines} == {0} and len(lines) == 2
    assert (trained / "checkpoints" / "epoch_1.ckpt").exists()
    assert json.loads((trained / "config.json").read_text())["epochs"] == 1
    jsonschema.validate(json.loads((trained / "metrics.json").read_text()), REPORT_SCHEMA)


def test_refuses_non_empty_out_without_force(trained, tmp_path, synth, capsys):
    out = tmp_path / "evalout"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["eval", "--checkpoint", str(trained / "checkpoints" / "epoch_1.ckpt"), "--data", str(synth / "tgt"),
            "--out", str(out)]
    assert main(args) == 1
    assert "--force" in capsys.readouterr().err and (out / "keep.txt").exists()
    assert main(args + ["--force"]) == 0
    assert not (out / "keep.txt").exists() and (out / "metrics.json").exists()
    assert main(args + ["--force"]) == 0


def test_print_schema(capsys):
    assert main(["train", "--print-schema"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads(json.dumps(schema(), default=str))
    assert printed["train"]["lr"]["default"] == 1e-4 and "ablation" in printed["train"]


def test_eval_input_size_mismatch(trained, synth, tmp_path, capsys):
    ckpt = str(trained / "checkpoints" / "epoch_1.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(synth / "tgt"), "--out", str(tmp_path / "e"),
                 "--input-size", "64x64"]) == 1
    assert "input size mismatch" in capsys.readouterr().err


def test_eval_config_mismatch(trained, synth, tmp_path, capsys):
    cfg = write_config(tmp_path / "other.yaml", synth, input_size=[64, 64])
    ckpt = str(trained / "checkpoints" / "epoch_1.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(synth / "tgt"), "--out", str(tmp_path / "e"),
                 "--config", str(cfg)]) == 1
    assert "input_size" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path, synth):
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--data", str(synth / "tgt"),
                 "--out", str(tmp_path / "e")]) == 1


def test_eval_spacing_and_overlays(trained, synth, tmp_path):
    ckpt = str(trained / "checkpoints" / "epoch_1.ckpt")
    reports = {}
    for sp in ("1.0", "0.2"):
        out = tmp_path / f"sp{sp}"
        assert main(["eval", "--checkpoint", ckpt, "--data", str(synth / "tgt"), "--out", str(out),
                     "--spacing", sp, "--threshold", "0.3", "--overlays"]) == 0
        reports[sp] = json.loads((out / "metrics.json").read_text())
        overlays = sorted(p.name for p in (out / "overlays").iterdir())
        assert overlays == sorted(p.name for p in (synth / "tgt" / "images").iterdir())
    for a, b in zip(reports["1.0"]["per_image"], reports["0.2"]["per_image"]):
        assert a["dice"] == b["dice"]
        if a["asd"] is not None:
            assert b["asd"] == a["asd"] * 0.2 and b["hd95"] == a["hd95"] * 0.2


def test_boundary_export(tmp_path):
    masks = tmp_path / "masks"
    masks.mkdir()
    sq = square_mask(24, 10)
    Image.fromarray((sq * 255).astype(np.uint8)).save(masks / "square.png")
    Image.fromarray(np.full((24, 24), 255, np.uint8)).save(masks / "full.png")
    assert main(["boundary", str(masks), "--out", str(tmp_path / "b")]) == 0
    full = np.asarray(Image.open(tmp_path / "b" / "full.png"))
    assert full.max() == 0
    got = np.asarray(Image.open(tmp_path / "b" / "square.png"))
    assert got.max() == 255 and got.dtype == np.uint8
    assert np.abs(got / 255.0 - boundary_map(sq).values).max() <= 1 / 255
    assert main(["boundary", str(masks / "square.png"), "--out", str(tmp_path / "b")]) == 1
    assert main(["boundary", str(masks / "square.png"), "--kernel", "4", "--out", str(tmp_path / "c")]) == 1


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen-synth", "--style", "stars", "--n", "2", "--out", str(tmp_path)])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1


def test_bad_dataset_is_runtime_error(tmp_path, synth, capsys):
    bad = tmp_path / "bad"
    (bad / "images").mkdir(parents=True)
    (bad / "masks").mkdir()
    Image.fromarray(np.zeros((32, 32, 3), np.uint8)).save(bad / "images" / "a.png")
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"train": TINY_TRAIN, "source": {"root": str(bad)},
                                   "target": {"root": str(synth / "tgt")}, "output_dir": "r"}))
    assert main(["train", "--config", str(cfg)]) == 2
    assert "a.png" in capsys.readouterr().err
