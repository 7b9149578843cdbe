import json

import numpy as np
import pytest

from latent_ofer.cli import build_parser, main
from latent_ofer.patchgrid import OcclusionMask, save_image


def write_config(path, overrides, out_dir):
    """Nest dotted overrides into a JSON config file"""
    nested = {}
    for key, value in {**overrides, "paths.out_dir": str(out_dir)}.items():
        *sections, leaf = key.split(".")
        node = nested
        for section in sections:
            node = node.setdefault(section, {})
        node[leaf] = value
    path.write_text(json.dumps(nested))
    return str(path)


@pytest.fixture
def cli_config(tmp_path, tiny_overrides):
    return write_config(tmp_path / "config.json", tiny_overrides, tmp_path / "run")


@pytest.fixture
def trained_config(tmp_path, tiny_overrides, trained_ofer):
    return write_config(tmp_path / "trained.json", tiny_overrides, trained_ofer.config.out_dir)


@pytest.fixture
def face_png(tmp_path, trained_ofer):
    path = str(tmp_path / "probe.png")
    save_image(trained_ofer.splits()[0].images[0], path)
    return path


def test_parser_accepts_global_flags_after_subcommand():
    args = build_parser().parse_args(["detect", "--in", "x.png", "--seed", "9", "-v"])
    assert (args.command, args.input, args.seed, args.verbose) == ("detect", "x.png", 9, True)
    args = build_parser().parse_args(["--seed", "4", "status"])
    assert args.seed == 4


def test_unknown_command_is_usage_error(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["bogus"])
    assert excinfo.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_required_flag(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["detect"])
    assert excinfo.value.code == 1
    assert "--in" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[nowhere]\nx = 1\n")
    assert main(["status", "--config", str(path)]) == 1
    assert "❌" in capsys.readouterr().err


def test_status_lists_untrained_stages(cli_config, capsys):
    assert main(["status", "--config", cli_config]) == 0
    out = capsys.readouterr().out
    assert "✗ svdd (not trained)" in out


def test_missing_model_exits_3(cli_config, tmp_path, capsys):
    image = str(tmp_path / "x.png")
    save_image(np.full((32, 32, 3), 0.5), image)
    assert main(["predict", "--config", cli_config, "--in", image]) == 3
    assert "Missing stage: svdd" in capsys.readouterr().err


def test_missing_image_exits_2(trained_config, tmp_path, capsys):
    assert main(["detect", "--config", trained_config, "--in", str(tmp_path / "absent.png")]) == 2


def test_wrong_image_size_exits_2(trained_config, tmp_path):
    image = str(tmp_path / "big.png")
    save_image(np.full((48, 48, 3), 0.5), image)
    assert main(["detect", "--config", trained_config, "--in", image]) == 2


def test_gen_data(cli_config, tmp_path, capsys):
    assert main(["gen-data", "--config", cli_config, "--n", "3"]) == 0
    assert (tmp_path / "run" / "data" / "labels.csv").exists()
    assert "✓ Manifest written" in capsys.readouterr().out


def test_detect_writes_mask(trained_config, trained_ofer, face_png, capsys):
    assert main(["detect", "--config", trained_config, "--in", face_png, "-v"]) == 0
    out = capsys.readouterr().out
    assert "patch   0" in out
    path = f"{trained_ofer.config.out_dir}/masks/probe.json"
    mask = OcclusionMask.load(path)
    assert (mask.rows, mask.cols) == (2, 2)


def test_reconstruct_with_mask_and_ground_truth(trained_config, face_png, tmp_path):
    mask_path = str(tmp_path / "mask.json")
    OcclusionMask([True, False, False, False], 2, 2).save(mask_path)
    out = str(tmp_path / "restored.png")
    argv = ["reconstruct", "--config", trained_config, "--in", face_png, "--mask", mask_path]
    assert main(argv + ["--image-out", out, "--ground-truth", face_png, "--assembly", "conv"]) == 0
    summary = json.loads((tmp_path / "restored.json").read_text())
    assert summary["occluded_patch_indices"] == [0]
    assert summary["assembly"] == "conv"
    assert {"psnr", "ssim"} <= set(summary)


def test_reconstruct_fully_masked_exits_2(trained_config, face_png, tmp_path, capsys):
    mask_path = str(tmp_path / "mask.json")
    OcclusionMask([True] * 4, 2, 2).save(mask_path)
    assert main(["reconstruct", "--config", trained_config, "--in", face_png, "--mask", mask_path]) == 2
    assert "❌" in capsys.readouterr().err


def test_predict_writes_json(trained_config, face_png, tmp_path):
    out = tmp_path / "pred.json"
    argv = ["predict", "--config", trained_config, "--in", face_png, "--json-out", str(out), "--fusion", "cnn"]
    assert main(argv) == 0
    payload = json.loads(out.read_text())
    assert set(payload) == {"label", "expression", "probabilities", "occluded_patch_indices", "selected_keys"}
    assert len(payload["probabilities"]) == 7
    assert payload["selected_keys"] == []


def test_sweep_writes_report_and_plot(trained_config, trained_ofer):
    assert main(["sweep", "--config", trained_config, "--no-reconstruction"]) == 0
    reports = f"{trained_ofer.config.out_dir}/reports"
    report = json.loads(open(f"{reports}/sweep.json").read())
    assert set(report["sweep"]) == {"random", "grad"}
    assert open(f"{reports}/sweep.png", "rb").read(4) == b"\x89PNG"
