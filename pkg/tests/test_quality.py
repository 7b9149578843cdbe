import math

import numpy as np
import pytest

from latent_ofer.errors import DimensionMismatchError
from latent_ofer.quality import QualityScore, image_quality, mean_psnr, psnr, ssim


def _scalar_ssim(a, b):
    """Direct per-window loop over a single-channel image"""
    x = np.arange(11) - 5.0
    window = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
    w2 = np.outer(window, window) / window.sum() ** 2
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w = a.shape
    values = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            mu_a, mu_b = (w2 * pa).sum(), (w2 * pb).sum()
            var_a = (w2 * pa * pa).sum() - mu_a ** 2
            var_b = (w2 * pb * pb).sum() - mu_b ** 2
            cov = (w2 * pa * pb).sum() - mu_a * mu_b
            values.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
            )
    return float(np.mean(values))


def test_identical_images(rng):
    image = rng.random((32, 32, 3))
    score = image_quality(image, image)
    assert score.psnr == math.inf
    assert score.ssim == pytest.approx(1.0)
    assert score.as_dict()["psnr"] == "inf"


def test_uniform_offset_is_20db(rng):
    image = 0.5 * rng.random((16, 16, 3))
    assert psnr(image, image + 0.1) == pytest.approx(20.0)


def test_masked_psnr_counts_only_masked_pixels(rng):
    image = rng.random((16, 16, 3)) * 0.5
    other = image.copy()
    other[:8] += 0.1
    mask = np.zeros((16, 16), dtype=bool)
    mask[:8] = True
    assert psnr(image, other, mask) == pytest.approx(20.0)
    assert psnr(image, other, ~mask) == math.inf
    assert psnr(image, other, np.zeros((16, 16), dtype=bool)) == math.inf


def test_psnr_shape_errors(rng):
    with pytest.raises(DimensionMismatchError):
        psnr(rng.random((8, 8, 3)), rng.random((8, 9, 3)))
    with pytest.raises(DimensionMismatchError):
        psnr(rng.random((8, 8, 3)), rng.random((8, 8, 3)), np.ones((4, 4), dtype=bool))


def test_ssim_matches_scalar_loop(rng):
    a = rng.random((20, 24))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(_scalar_ssim(a, b), abs=1e-6)


def test_ssim_averages_channels(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    per_channel = [_scalar_ssim(a[..., c], b[..., c]) for c in range(3)]
    assert ssim(a, b) == pytest.approx(np.mean(per_channel), abs=1e-6)


def test_psnr_over_masked_pixels_matches_direct_mse(rng):
    a = rng.random((16, 16, 3))
    b = np.clip(a + 0.05 * rng.normal(size=a.shape), 0, 1)
    mask = rng.random((16, 16)) < 0.3
    mse = np.mean((a[mask] - b[mask]) ** 2)
    assert psnr(a, b, mask) == pytest.approx(10 * math.log10(1.0 / mse), rel=1e-9)


def test_ssim_rejects_small_images(rng):
    with pytest.raises(ValueError):
        ssim(rng.random((10, 16, 3)), rng.random((10, 16, 3)))


def test_ssim_decreases_with_noise(rng):
    a = rng.random((32, 32))
    light = np.clip(a + 0.02 * rng.normal(size=a.shape), 0, 1)
    heavy = np.clip(a + 0.3 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, light) > ssim(a, heavy)


def test_mean_psnr():
    assert mean_psnr([20.0, 30.0, math.inf]) == pytest.approx(25.0)
    assert mean_psnr(v for v in [math.inf, math.inf]) == math.inf
    with pytest.raises(ValueError):
        mean_psnr([])


def test_quality_score_json_friendly():
    assert QualityScore(31.5, 0.9).as_dict() == {"psnr": 31.5, "ssim": 0.9}
