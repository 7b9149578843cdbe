"""
Configuration management for Latent-OFER experiments
"""

import copy
import json
import logging
import os
import random
import sys
from typing import Any, Dict, Iterator, List, Optional

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

logger = logging.getLogger(__name__)

SEED_ENV = "LATENT_OFER_SEED"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "paths": {
        "out_dir": "runs",
        "manifest": "",
    },
    "data": {
        "image_size": 96,
        "channels": 3,
        "n_images": 1400,
        "val_fraction": 0.2,
    },
    "model": {
        "patch_size": 16,
        "latent_dim": 64,
        "depth": 4,
        "heads": 4,
        "mlp_dim": 128,
        "cnn_channels": [16, 32, 64, 64],
        "unet_channels": [16, 32, 64, 64],
        "svdd_hidden": 128,
        "svdd_out": 32,
    },
    "svdd": {
        "weight_decay": 1e-6,
        "quantile": 0.99,
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 256,
    },
    "recon": {
        "epochs": 20,
        "lr": 2e-4,
        "disc_lr": 2e-4,
        "batch_size": 16,
        "lambda_re": 1.0,
        "lambda_c": 0.01,
        "lambda_sc": 1.0,
        "lambda_d": 0.002,
        "masked_weight": 6.0,
        "min_proportion": 0.1,
        "max_proportion": 0.5,
        "assembly": "self-assembly",
    },
    "fer": {
        "epochs": 25,
        "lr": 1e-3,
        "batch_size": 32,
    },
    "eval": {
        "protocol": "random",
        "proportion": 0.25,
        "proportions": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "coverage_threshold": 0.25,
    },
}


class ExperimentConfig:
    """Configuration manager for one experiment (seed, sizes, loss weights, paths)"""

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Initialize configuration

        Args:
            config_file: Path to a .toml or .json config file (defaults only if omitted)
            overrides: Dotted-key values applied after the file, e.g. {"svdd.epochs": 2}
        """
        self.config_file = config_file
        self.config = self._load_config()
        for key, value in (overrides or {}).items():
            self.set(key, value)

        env_seed = os.getenv(SEED_ENV)
        if env_seed is not None:
            try:
                self.config["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}")

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from file with defaults"""
        config = copy.deepcopy(DEFAULTS)
        if not self.config_file:
            return config

        if not os.path.exists(self.config_file):
            raise ConfigError(f"Config file not found: {self.config_file}")

        try:
            if self.config_file.endswith(".json"):
                with open(self.config_file, "r") as f:
                    file_config = json.load(f)
            else:
                with open(self.config_file, "rb") as f:
                    file_config = tomllib.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError(f"Could not load config file {self.config_file}: {e}")

        for key, value in file_config.items():
            if key not in config:
                raise ConfigError(f"Unknown config section: {key}")
            if isinstance(config[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"Config section [{key}] must be a table")
                for sub_key in value:
                    if sub_key not in config[key]:
                        raise ConfigError(f"Unknown config key: {key}.{sub_key}")
                config[key].update(value)
            else:
                config[key] = value
        return config

    def save_config(self, path: Optional[str] = None):
        """Save current configuration as JSON"""
        path = path or self.config_file
        if not path:
            raise ConfigError("No path to save the configuration to")
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

        with open(path, "w") as f:
            json.dump(self.config, f, indent=2, sort_keys=True)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dotted key"""
        node: Any = self.config
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value: Any):
        """Set configuration value by dotted key"""
        parts = key.split(".")
        node = self.config
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"Unknown config section: {part}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"Unknown config key: {key}")
        node[parts[-1]] = value

    def section(self, name: str) -> Dict[str, Any]:
        """Copy of one config section"""
        return dict(self.config[name])

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def out_dir(self) -> str:
        return self.get("paths.out_dir")

    @property
    def models_dir(self) -> str:
        return os.path.join(self.out_dir, "models")

    @property
    def reports_dir(self) -> str:
        return os.path.join(self.out_dir, "reports")

    @property
    def manifest(self) -> str:
        return self.get("paths.manifest") or os.path.join(self.out_dir, "data", "labels.csv")

    @property
    def proportions(self) -> List[float]:
        return [float(p) for p in self.get("eval.proportions")]

    def validate(self, check_paths: bool = True):
        """Check invariants; raises ConfigError on the first violation"""
        model = self.config["model"]
        image_size = self.get("data.image_size")
        patch_size = model["patch_size"]
        if image_size <= 0 or patch_size <= 0 or image_size % patch_size != 0:
            raise ConfigError(f"image_size {image_size} must be a positive multiple of patch_size {patch_size}")
        if 2 ** len(model["cnn_channels"]) != patch_size:
            raise ConfigError("cnn_channels needs one stage per halving down to the patch grid")
        if 2 ** len(model["unet_channels"]) != patch_size:
            raise ConfigError("unet_channels needs one stage per halving down to the patch grid")
        if model["latent_dim"] % model["heads"] != 0:
            raise ConfigError("latent_dim must be divisible by heads")

        quantile = self.get("svdd.quantile")
        if not 0.0 < quantile <= 1.0:
            raise ConfigError(f"svdd.quantile must be in (0, 1], got {quantile}")
        if self.get("svdd.weight_decay") <= 0:
            raise ConfigError("svdd.weight_decay must be positive")

        for name in ("lambda_re", "lambda_c", "lambda_sc", "lambda_d", "masked_weight"):
            if self.get(f"recon.{name}") < 0:
                raise ConfigError(f"recon.{name} must be nonnegative")
        if self.get("recon.assembly") not in ("self-assembly", "conv"):
            raise ConfigError("recon.assembly must be 'self-assembly' or 'conv'")

        props = self.proportions + [
            self.get("eval.proportion"),
            self.get("recon.min_proportion"),
            self.get("recon.max_proportion"),
        ]
        if any(not 0.0 <= p <= 1.0 for p in props):
            raise ConfigError("occlusion proportions must lie in [0, 1]")
        if self.get("eval.protocol") not in ("random", "grad"):
            raise ConfigError("eval.protocol must be 'random' or 'grad'")

        manifest = self.get("paths.manifest")
        if check_paths and manifest and not os.path.exists(manifest):
            raise ConfigError(f"Manifest not found: {manifest}")

    def show_config(self):
        """Display current configuration"""
        print("Current configuration:")
        print(f"  Config file: {self.config_file or 'defaults'}")
        for key, value in self.config.items():
            if isinstance(value, dict):
                print(f"  [{key}]")
                for sub_key, sub_value in value.items():
                    print(f"    {sub_key} = {sub_value}")
            else:
                print(f"  {key} = {value}")


def seed_everything(seed: int):
    """Seed python, numpy and torch RNGs"""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
    """Index batches over a permutation of range(n) seeded by (seed, epoch); the last batch may be short"""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# Global config instance
_config = None


def get_config() -> ExperimentConfig:
    """Get global configuration instance"""
    global _config
    if _config is None:
        _config = ExperimentConfig()
    return _config


def set_config(config: ExperimentConfig):
    """Replace the global configuration instance"""
    global _config
    _config = config
