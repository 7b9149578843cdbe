import os

import numpy as np
import pytest
import torch

from latent_ofer.config import ExperimentConfig
from latent_ofer.pipeline import LatentOfer

TINY = {
    "seed": 3,
    "data.image_size": 32,
    "data.n_images": 28,
    "data.val_fraction": 0.25,
    "model.latent_dim": 16,
    "model.depth": 1,
    "model.heads": 2,
    "model.mlp_dim": 32,
    "model.cnn_channels": [4, 8, 8, 8],
    "model.unet_channels": [4, 8, 8, 8],
    "model.svdd_hidden": 16,
    "model.svdd_out": 8,
    "svdd.epochs": 2,
    "svdd.batch_size": 32,
    "recon.epochs": 1,
    "recon.batch_size": 7,
    "fer.epochs": 2,
    "fer.batch_size": 8,
    "eval.proportions": [0.0, 0.25, 0.5],
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs (set LATENT_OFER_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("LATENT_OFER_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set LATENT_OFER_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("LATENT_OFER_SEED", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_overrides():
    return dict(TINY)


@pytest.fixture
def tiny_config(tmp_path):
    return ExperimentConfig(overrides={**TINY, "paths.out_dir": str(tmp_path / "run")})


@pytest.fixture(scope="session")
def trained_ofer(tmp_path_factory):
    """Every stage trained once on a tiny 32x32 dataset"""
    out_dir = tmp_path_factory.mktemp("trained")
    config = ExperimentConfig(overrides={**TINY, "paths.out_dir": str(out_dir)})
    ofer = LatentOfer(config)
    ofer.generate_data()
    ofer.train_all(with_conv_baseline=True)
    return ofer


@pytest.fixture
def grad_check():
    """
    Compare autograd against float64 central differences (step 1e-5)

    fn is a zero-argument closure returning a scalar that depends on
    tensor; tensor is perturbed in place and restored.
    """

    def check(fn, tensor, h=1e-5, rtol=1e-4):
        loss = fn()
        (analytic,) = torch.autograd.grad(loss, tensor)
        numeric = torch.zeros_like(tensor)
        flat = tensor.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = float(fn())
                flat[i] = orig - h
                minus = float(fn())
                flat[i] = orig
                numeric.view(-1)[i] = (plus - minus) / (2 * h)
        err = (analytic - numeric).norm() / max(float(numeric.norm()), 1e-12)
        assert float(err) < rtol, f"relative gradient error {float(err):.2e}"

    return check
