import json
from dataclasses import replace

import numpy as np
import pytest

from xct.checkpoint import read_checkpoint, write_checkpoint
from xct.cli import main
from xct.config import TrainConfig
from xct.projection import drr
from xct.runlog import MANIFEST_NAME, RunManifest
from xct.volume import load_volume, load_xray


def _phantom(out, *extra: str) -> int:
    return main(["phantom", "--out", str(out), "--side", "16", *extra])


@pytest.fixture
def config_file(tiny_config, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(tiny_config.to_json())
    return path


@pytest.fixture
def datasets(tmp_path):
    paired, unpaired = tmp_path / "paired", tmp_path / "unpaired"
    assert _phantom(paired, "--n", "6", "--seed", "1") == 0
    assert _phantom(unpaired, "--n", "4", "--seed", "2", "--kind", "unpaired", "--gamma", "1.4", "--noise", "0.02") == 0
    return paired, unpaired


def test_print_default_config(capsys):
    assert main(["--print-default-config"]) == 0
    assert TrainConfig.from_json(capsys.readouterr().out) == TrainConfig()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["phantom"],
        ["phantom", "--out", "x", "--n", "two"],
        ["export", "--in", "a.vol", "--out", "x", "--plane", "oblique"],
        ["ablate", "--out", "x", "--data", "a", "--unpaired", "b", "--test", "c", "--lambda4", "0,ten"],
    ],
)
def test_usage_errors(argv):
    assert main(argv) == 2


def test_bad_class_mix(tmp_path):
    assert _phantom(tmp_path / "p", "--n", "4", "--class-mix", "0.5,0.6") == 2


def test_phantom_writes_a_manifest(tmp_path):
    out = tmp_path / "p"
    assert _phantom(out, "--n", "3", "--class-mix", "1/3,1/3,1/3") == 0

    manifest = RunManifest.read(out)
    assert manifest.command == "phantom"
    assert manifest.datasets["dataset"]["kind"] == "paired"
    assert "sample_0000.vol" in manifest.outputs
    assert len(list(out.glob("*.xry"))) == 3


def test_existing_output_needs_force(tmp_path):
    out = tmp_path / "p"
    assert _phantom(out, "--n", "2") == 0
    assert _phantom(out, "--n", "2") == 2
    assert _phantom(out, "--n", "2", "--force") == 0


def test_drr_and_export(datasets, tmp_path):
    paired, _ = datasets
    volume_path = paired / "sample_0000.vol"

    assert main(["drr", "--in", str(volume_path), "--out", str(tmp_path / "x.xry")]) == 0
    expected = drr(load_volume(volume_path))
    assert load_xray(tmp_path / "x.xry").pixels.tobytes() == expected.pixels.tobytes()

    assert main(["export", "--in", str(volume_path), "--out", str(tmp_path / "slices")]) == 0
    assert len(list((tmp_path / "slices").glob("slice_*.pgm"))) == 16
    assert (tmp_path / "slices" / MANIFEST_NAME).exists()


def test_corrupt_volume_is_a_data_error(tmp_path):
    path = tmp_path / "bad.vol"
    path.write_bytes(b"XCTV")
    assert main(["drr", "--in", str(path), "--out", str(tmp_path / "x.xry")]) == 3


def test_train_finetune_eval_compare(datasets, config_file, tmp_path):
    paired, unpaired = datasets
    train, tune, evaluation, compare = (tmp_path / name for name in ("train", "tune", "eval", "compare"))
    common = ["--config", str(config_file), "--data", str(paired)]

    assert main(["train", "--out", str(train), *common]) == 0
    assert read_checkpoint(train / "final.ckpt").stage == "pretrain"
    manifest = RunManifest.read(train)
    assert manifest.config_hash is not None
    assert manifest.datasets["paired"]["path"] == str(paired)
    assert "train_log.ndjson" in manifest.outputs

    assert main(["finetune", "--out", str(tune), *common, "--unpaired", str(unpaired), "--start", str(train / "best.ckpt")]) == 0
    assert read_checkpoint(tune / "final.ckpt").stage == "finetune"

    argv = ["eval", "--out", str(evaluation), "--config", str(config_file), "--checkpoint", str(tune / "final.ckpt")]
    assert main([*argv, "--test", str(unpaired), "--train-data", str(paired)]) == 0
    metrics = json.loads((evaluation / "metrics.json").read_text())
    assert metrics["reconstruction"]["count"] == 4
    assert metrics["classification"]["count"] == 4
    assert (evaluation / "metrics.txt").exists()

    checkpoints = ["--checkpoint", f"pre={train / 'final.ckpt'}", "--checkpoint", str(tune / "final.ckpt")]
    assert main(["compare", "--out", str(compare), "--xrays", str(unpaired), "--limit", "2", *checkpoints]) == 0
    assert sorted(p.name for p in compare.glob("*.pgm")) == ["compare_0000.pgm", "compare_0001.pgm"]


def test_resume_needs_a_pretraining_checkpoint(datasets, config_file, tmp_path):
    paired, unpaired = datasets
    common = ["--config", str(config_file), "--data", str(paired)]
    assert main(["train", "--out", str(tmp_path / "t"), *common]) == 0
    assert main(["train", "--out", str(tmp_path / "t2"), *common, "--resume", str(tmp_path / "t" / "final.ckpt")]) == 0
    assert main(["train", "--out", str(tmp_path / "t3"), *common, "--baseline", "--resume", str(tmp_path / "t" / "final.ckpt")]) == 2

    start = str(tmp_path / "t" / "final.ckpt")
    assert main(["finetune", "--out", str(tmp_path / "f"), *common, "--unpaired", str(unpaired), "--start", start]) == 0
    assert main(["train", "--out", str(tmp_path / "t4"), *common, "--resume", str(tmp_path / "f" / "final.ckpt")]) == 2


def test_data_errors(datasets, config_file, tmp_path):
    paired, unpaired = datasets

    assert main(["train", "--out", str(tmp_path / "a"), "--data", str(tmp_path / "missing")]) == 3
    assert main(["train", "--out", str(tmp_path / "b"), "--data", str(unpaired)]) == 3

    train = tmp_path / "t"
    assert main(["train", "--out", str(train), "--config", str(config_file), "--data", str(paired)]) == 0
    argv = ["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(train / "final.ckpt"), "--test", str(paired)]
    assert main(argv) == 3


def test_default_config_rejects_a_smaller_dataset(datasets, tmp_path):
    paired, _ = datasets
    assert main(["train", "--out", str(tmp_path / "t"), "--data", str(paired)]) == 3


def test_bad_config_file(datasets, tmp_path):
    paired, _ = datasets
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"volume_side": 20}))
    assert main(["train", "--out", str(tmp_path / "t"), "--config", str(config), "--data", str(paired)]) == 2


def test_ablate(datasets, config_file, tmp_path, monkeypatch):
    paired, unpaired = datasets
    out = tmp_path / "ablation"
    argv = [
        "ablate", "--out", str(out), "--config", str(config_file), "--data", str(paired),
        "--unpaired", str(unpaired), "--test", str(unpaired), "--lambda4", "0,10", "--seeds", "2",
    ]

    monkeypatch.setenv("XCT_THREADS", "zero")
    assert main(argv) == 2

    monkeypatch.setenv("XCT_THREADS", "1")
    assert main([*argv, "--force"]) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [r["lambda4"] for r in rows] == [0.0, 10.0]
    assert all(r["runs"] == 2 for r in rows)
    assert np.isfinite(rows[0]["mean"]["projection_mse"])
    assert RunManifest.read(out).command == "ablate"


def test_training_logs_a_summary(datasets, config_file, tmp_path, capsys):
    paired, _ = datasets
    assert main(["train", "--out", str(tmp_path / "t"), "--config", str(config_file), "--data", str(paired)]) == 0
    err = capsys.readouterr().err
    assert "training summary" in err
    assert "parameters" in err


def test_non_finite_training_exits_with_4(datasets, tiny_config, tmp_path):
    paired, _ = datasets
    short = tmp_path / "short.json"
    short.write_text(replace(tiny_config, pretrain_epochs=1).to_json())
    full = tmp_path / "full.json"
    full.write_text(tiny_config.to_json())

    assert main(["train", "--out", str(tmp_path / "t"), "--config", str(short), "--data", str(paired)]) == 0
    ckpt = read_checkpoint(tmp_path / "t" / "final.ckpt")
    ckpt.tensors["g.head.b"] = np.full_like(ckpt.tensors["g.head.b"], np.nan)
    poisoned = write_checkpoint(ckpt, tmp_path / "poisoned.ckpt")

    argv = ["train", "--out", str(tmp_path / "t2"), "--config", str(full), "--data", str(paired), "--resume", str(poisoned)]
    assert main(argv) == 4


def test_phantom_output_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _phantom(a, "--n", "4", "--seed", "5") == 0
    assert _phantom(b, "--n", "4", "--seed", "5") == 0

    names = sorted(p.name for p in a.iterdir() if p.name != MANIFEST_NAME)
    assert names == sorted(p.name for p in b.iterdir() if p.name != MANIFEST_NAME)
    assert all((a / name).read_bytes() == (b / name).read_bytes() for name in names)
