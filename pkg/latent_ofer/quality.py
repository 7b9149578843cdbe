"""
Image quality metrics (PSNR / SSIM) on [0, 1] images
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .errors import DimensionMismatchError

DATA_RANGE = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    ssim: float

    def as_dict(self) -> dict:
        # JSON has no infinity; identical images are reported as the string "inf"
        return {"psnr": self.psnr if math.isfinite(self.psnr) else "inf", "ssim": self.ssim}


def _as_pair(z_gt: np.ndarray, z_rec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(z_gt, dtype=np.float64)
    b = np.asarray(z_rec, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(z_gt: np.ndarray, z_rec: np.ndarray, pixel_mask: Optional[np.ndarray] = None) -> float:
    """
    Peak signal-to-noise ratio in dB; +inf for identical inputs

    Args:
        pixel_mask: optional H x W boolean array; only those pixels count
    """
    a, b = _as_pair(z_gt, z_rec)
    if pixel_mask is not None:
        pixel_mask = np.asarray(pixel_mask, dtype=bool)
        if pixel_mask.shape != a.shape[:2]:
            raise DimensionMismatchError(f"Mask shape {pixel_mask.shape} does not match image {a.shape[:2]}")
        a, b = a[pixel_mask], b[pixel_mask]
    if a.size == 0 or np.array_equal(a, b):
        return math.inf
    return float(peak_signal_noise_ratio(a, b, data_range=DATA_RANGE))


def ssim(z_gt: np.ndarray, z_rec: np.ndarray) -> float:
    """
    Structural similarity with an 11-tap Gaussian window (sigma 1.5)

    Population covariances, data range 1; the map is averaged over the
    region where the window fits, then over channels.
    """
    a, b = _as_pair(z_gt, z_rec)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    return float(
        structural_similarity(
            a,
            b,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=DATA_RANGE,
            channel_axis=-1,
        )
    )


def image_quality(z_gt: np.ndarray, z_rec: np.ndarray) -> QualityScore:
    """(PSNR, SSIM) of a reconstruction against the ground truth"""
    return QualityScore(psnr(z_gt, z_rec), ssim(z_gt, z_rec))


def mean_psnr(values) -> float:
    """Mean over finite values; +inf only if every value is infinite"""
    values = list(values)
    finite = [v for v in values if math.isfinite(v)]
    if not values:
        raise ValueError("No PSNR values to average")
    if not finite:
        return math.inf
    return float(np.mean(finite))
