import json

import pytest

from cyclebev import cli
from cyclebev.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

SMALL = {"image_height": 16, "image_width": 32, "nx": 32, "ny": 32, "extent_x": 16.0, "extent_y": 16.0,
         "vehicle_count": [1, 2], "pedestrian_count": [1, 2], "occluded_fraction": 0.0, "s": 1,
         "feat_channels": 8, "dim": 8, "heads": 2, "vt_layers": 1, "ivt_layers": 1, "depth_bins": 4,
         "epochs": 1, "batch_size": 2, "val_scenes": 2}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--scenes", "6", "--seed", "1", "--out", str(data)]) == 0
    return root, cfg, data


def test_unknown_command(capsys):
    assert main(["fly"]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK


def test_dispatch_rejects_unknown():
    with pytest.raises(cli.UsageError):
        cli.dispatch("fly", None, None)


def test_gen_data_manifest(small):
    _, _, data = small
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["scene_ids"]) == 6
    assert json.loads((data / "resolved_config.json").read_text())["data_seed"] == 1


def test_gen_data_is_rerunnable(small, tmp_path):
    _, cfg, data = small
    again = tmp_path / "again"
    assert main(["gen-data", "--config", str(cfg), "--scenes", "6", "--seed", "1", "--out", str(again)]) == 0
    for f in data.rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (again / f.relative_to(data)).read_bytes(), f.name


def test_gen_data_ten_scenes(tmp_path, small):
    _, cfg, _ = small
    assert main(["gen-data", "--config", str(cfg), "--scenes", "10", "--seed", "1", "--out",
                 str(tmp_path / "d")]) == 0
    assert len(json.loads((tmp_path / "d" / "manifest.json").read_text())["scene_ids"]) == 10


def test_cyclebev_without_ivt_checkpoint(small, capsys):
    _, cfg, data = small
    rc = main(["train", "--mode", "cyclebev", "--config", str(cfg), "--data", str(data), "--out", str(data.parent / "x")])
    assert rc == EXIT_USAGE
    assert "--ivt-ckpt" in capsys.readouterr().err


def test_config_errors_are_usage_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lamda3": 1.0}))
    assert main(["train", "--config", str(bad)]) == EXIT_USAGE
    assert "lambda3" in capsys.readouterr().err
    assert main(["train", "--seed", "x"]) == EXIT_USAGE


def test_missing_dataset_is_runtime_failure(tmp_path, small):
    _, cfg, _ = small
    rc = main(["train", "--mode", "bce_only", "--config", str(cfg), "--data", str(tmp_path / "none"),
               "--out", str(tmp_path / "run")])
    assert rc == EXIT_RUNTIME


def test_pipeline(small, capsys):
    root, cfg, data = small
    c = ["--config", str(cfg), "--data", str(data)]
    assert main(["pretrain-ivt", *c, "--out", str(root / "ivt")]) == 0
    ivt = root / "ivt" / "ivt_dual.bin"
    assert ivt.exists()
    assert main(["train", "--mode", "cyclebev", *c, "--ivt-ckpt", str(ivt), "--out", str(root / "run")]) == 0
    ckpt = root / "run" / "ckpt_epoch000.bin"
    assert ckpt.exists() and (root / "run" / "resolved_config.json").exists()
    capsys.readouterr()
    assert main(["eval", *c, "--ckpt", str(ckpt), "--out", str(root / "eval")]) == 0
    result = json.loads((root / "eval" / "eval.json").read_text())
    assert set(result) >= {"all", "high_vis", "low_vis"} and result["scenes"] == 6
    assert main(["plot", "--run", str(root / "run"), "--out", str(root / "fig")]) == 0
    assert (root / "fig" / "loss_curves.png").exists()
    assert main(["train-ae", *c, "--out", str(root / "ae")]) == 0
    assert main(["train", "--mode", "ae_guidance", *c, "--ae-ckpt", str(root / "ae" / "ae.bin"),
                 "--out", str(root / "aerun")]) == 0


def test_ablate_and_plot_matrix(small):
    root, cfg, data = small
    out = root / "ablate"
    one_seed = root / "ablate.json"
    one_seed.write_text(json.dumps({**SMALL, "seeds": [0]}))
    assert main(["ablate", "--config", str(one_seed), "--data", str(data), "--out", str(out)]) == 0
    d = json.loads((out / "ablation.json").read_text())
    assert d["rows"] == ["bce_only", "vcc_only", "vcc_height", "cyclebev", "cyclebev-single"]
    assert (out / "ivt_single.bin").exists() and (out / "ablation_iou.png").exists()
    assert main(["plot", "--matrix", str(out / "ablation.json"), "--out", str(root / "mfig")]) == 0


def test_selftest(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert "selftest passed" in capsys.readouterr().out
