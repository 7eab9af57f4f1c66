import json

import pytest

from tinymil.cli import main
from tinymil.pipeline import STAGES

FAST = {"bag_train": {"epochs": 6, "patience": 0}, "instance_train": {"epochs": 6, "patience": 0}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth-gen", "--out", str(root), "--n-images", "20", "--image-side", "128", "--seed", "2"]) == 0
    cfg = root / "config.json"
    cfg.write_text(json.dumps({**FAST, "synth": {"n_images": 20}}))
    return root, cfg


def _run_all(dataset, out, *extra):
    root, cfg = dataset
    return main(["run-all", "--config", str(cfg), "--data", str(root), "--out", str(out), *extra])


@pytest.mark.parametrize("mode", ["salimap", "typical", "baseline_grid"])
def test_run_all_modes(dataset, tmp_path, mode, capsys):
    assert _run_all(dataset, tmp_path / mode, "--mode", mode) == 0
    printed = json.loads(capsys.readouterr().out)
    on_disk = json.loads((tmp_path / mode / "eval" / "metrics.json").read_text())
    assert printed == on_disk
    assert on_disk["mode"] == mode and on_disk["split"] == "test"
    assert 0 <= on_disk["accuracy"] <= 1
    c = on_disk["confusion"]
    assert c["TP"] + c["FP"] + c["FN"] + c["TN"] == on_disk["n_bags"]
    assert (tmp_path / mode / "eval" / "metrics.csv").exists()
    figs = {p.name for p in (tmp_path / mode / "figures").iterdir()}
    assert "training_curves.png" in figs
    assert ("saliency_patches.png" in figs) == (mode == "salimap")
    assert ("deviation" in on_disk) == (mode == "baseline_grid")


def test_run_all_is_deterministic(dataset, tmp_path):
    for name in ("a", "b"):
        assert _run_all(dataset, tmp_path / name, "--no-figures") == 0
    a = (tmp_path / "a" / "eval" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "eval" / "metrics.json").read_bytes()
    assert not (tmp_path / "a" / "figures").exists()


def test_stages_one_by_one(dataset, tmp_path, capsys):
    root, cfg = dataset
    common = ["--config", str(cfg), "--data", str(root), "--out", str(tmp_path), "--no-figures"]
    for stage in STAGES:
        assert main([stage, *common]) == 0, stage
    assert json.loads(capsys.readouterr().out)["mode"] == "salimap"
    assert (tmp_path / "instances" / "audit.json").exists()
    assert (tmp_path / "instance_model" / "model.json").exists()


def test_stage_without_inputs_fails_with_stage_tag(dataset, tmp_path, capsys):
    root, cfg = dataset
    assert main(["train-bag", "--config", str(cfg), "--data", str(root), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: [train-bag]")


def test_missing_dataset_reports_stage(tmp_path, capsys):
    assert main(["split", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2
    assert "[split]" in capsys.readouterr().err


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["split", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_seed_must_be_unsigned():
    with pytest.raises(SystemExit):
        main(["split", "--seed", "-1"])
