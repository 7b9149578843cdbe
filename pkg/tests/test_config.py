import json

import numpy as np
import pytest

from latent_ofer.config import DEFAULTS, ExperimentConfig, epoch_batches, get_config, set_config
from latent_ofer.errors import ConfigError


def test_defaults():
    config = ExperimentConfig()
    assert config.seed == 0
    assert config.get("recon.lambda_c") == 0.01
    assert config.get("svdd.quantile") == 0.99
    assert config.get("model.patch_size") == 16
    assert config.get("missing.key", "fallback") == "fallback"
    config.validate()


def test_defaults_are_not_shared():
    a = ExperimentConfig()
    a.set("recon.lambda_sc", 0.0)
    assert ExperimentConfig().get("recon.lambda_sc") == 1.0
    assert DEFAULTS["recon"]["lambda_sc"] == 1.0


def test_toml_file_overrides_defaults(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text('seed = 11\n\n[recon]\nlambda_sc = 0.5\nassembly = "conv"\n')
    config = ExperimentConfig(str(path))
    assert config.seed == 11
    assert config.get("recon.lambda_sc") == 0.5
    assert config.get("recon.assembly") == "conv"
    assert config.get("recon.lambda_re") == 1.0


def test_json_file(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"svdd": {"epochs": 3}}))
    assert ExperimentConfig(str(path)).get("svdd.epochs") == 3


@pytest.mark.parametrize(
    "content",
    ['[bogus]\nx = 1\n', '[svdd]\nnot_a_key = 1\n', 'svdd = 3\n', '[svdd\n'],
)
def test_bad_files(tmp_path, content):
    path = tmp_path / "bad.toml"
    path.write_text(content)
    with pytest.raises(ConfigError):
        ExperimentConfig(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(str(tmp_path / "absent.toml"))


def test_set_unknown_key():
    config = ExperimentConfig()
    with pytest.raises(ConfigError):
        config.set("recon.lambda_x", 1.0)
    with pytest.raises(ConfigError):
        config.set("nowhere.epochs", 1)


def test_seed_env_wins_over_overrides(monkeypatch):
    monkeypatch.setenv("LATENT_OFER_SEED", "42")
    assert ExperimentConfig(overrides={"seed": 7}).seed == 42
    monkeypatch.setenv("LATENT_OFER_SEED", "forty-two")
    with pytest.raises(ConfigError):
        ExperimentConfig()


def test_paths(tmp_path):
    config = ExperimentConfig(overrides={"paths.out_dir": str(tmp_path)})
    assert config.models_dir == str(tmp_path / "models")
    assert config.reports_dir == str(tmp_path / "reports")
    assert config.manifest == str(tmp_path / "data" / "labels.csv")


@pytest.mark.parametrize(
    "key,value",
    [
        ("data.image_size", 100),
        ("model.cnn_channels", [8, 8]),
        ("model.unet_channels", [8, 8, 8]),
        ("model.heads", 3),
        ("svdd.quantile", 0.0),
        ("svdd.weight_decay", 0.0),
        ("recon.lambda_d", -1.0),
        ("recon.assembly", "attention"),
        ("eval.proportions", [0.0, 1.5]),
        ("eval.protocol", "sideways"),
    ],
)
def test_validate_rejects(key, value):
    config = ExperimentConfig(overrides={key: value})
    with pytest.raises(ConfigError):
        config.validate()


def test_validate_manifest_path(tmp_path):
    config = ExperimentConfig(overrides={"paths.manifest": str(tmp_path / "labels.csv")})
    with pytest.raises(ConfigError):
        config.validate()
    config.validate(check_paths=False)


def test_save_and_reload(tmp_path):
    config = ExperimentConfig(overrides={"fer.epochs": 4})
    path = str(tmp_path / "out" / "config.json")
    config.save_config(path)
    assert ExperimentConfig(path).get("fer.epochs") == 4
    with pytest.raises(ConfigError):
        ExperimentConfig().save_config()


def test_show_config(capsys):
    ExperimentConfig().show_config()
    out = capsys.readouterr().out
    assert "Config file: defaults" in out
    assert "[recon]" in out


def test_global_config():
    custom = ExperimentConfig(overrides={"seed": 5})
    set_config(custom)
    try:
        assert get_config() is custom
    finally:
        set_config(None)
    assert get_config().seed == 0


def test_epoch_batches():
    batches = list(epoch_batches(10, 4, seed=2, epoch=0))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    again = list(epoch_batches(10, 4, seed=2, epoch=0))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    other = np.concatenate(list(epoch_batches(10, 4, seed=2, epoch=1)))
    assert not np.array_equal(np.concatenate(batches), other)
    assert list(epoch_batches(0, 4, seed=2)) == []
    with pytest.raises(ValueError):
        list(epoch_batches(10, 0, seed=2))
