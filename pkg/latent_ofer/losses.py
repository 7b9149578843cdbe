"""
Loss stack of the hybrid reconstruction network

L = lambda_re L_re + lambda_c L_c + lambda_sc L_sc + lambda_d (L_d + L_df)
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, Tuple, Union

import torch
import torch.nn as nn

from .errors import DimensionMismatchError

Scalar = Union[float, torch.Tensor]

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_re: float = 1.0
    lambda_c: float = 0.01
    lambda_sc: float = 1.0
    lambda_d: float = 0.002

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")


@dataclass
class LossParts:
    re: Scalar = 0.0
    c: Scalar = 0.0
    sc: Scalar = 0.0
    d: Scalar = 0.0
    df: Scalar = 0.0

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def total_loss(parts: LossParts, weights: LossWeights) -> Scalar:
    """Weighted sum of the five loss terms"""
    for name, value in parts.as_floats().items():
        if not math.isfinite(value):
            raise ValueError(f"Loss part '{name}' is not finite: {value}")
    return (
        weights.lambda_re * parts.re
        + weights.lambda_c * parts.c
        + weights.lambda_sc * parts.sc
        + weights.lambda_d * (parts.d + parts.df)
    )


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(
    z_gt: torch.Tensor, z_rec: torch.Tensor, pixel_mask: torch.Tensor, masked_weight: float = 6.0
) -> torch.Tensor:
    """
    Weighted mean absolute error

    Masked pixels weigh masked_weight, the rest 1; the sum is divided by
    the element count (not by the weight total).
    """
    _check_same_shape(z_gt, z_rec)
    mask = pixel_mask.to(z_rec.dtype).expand_as(z_rec)
    weights = 1.0 + (masked_weight - 1.0) * mask
    return (weights * (z_rec - z_gt).abs()).mean()


def consistency_loss(rec_features: torch.Tensor, gt_features: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between encoder features of z_rec and z_gt"""
    _check_same_shape(rec_features, gt_features)
    return (rec_features - gt_features.detach()).pow(2).mean()


def semantic_consistency_from_probs(p_gt: torch.Tensor, p_rec: torch.Tensor, tol: float = 1e-5) -> torch.Tensor:
    """-sum_c p_c(z_gt) log p_c(z_rec), averaged over the batch"""
    _check_same_shape(p_gt, p_rec)
    for name, probs in (("p(z_gt)", p_gt), ("p(z_rec)", p_rec)):
        sums = probs.detach().sum(dim=-1)
        if (sums - 1.0).abs().max() > tol:
            raise ValueError(f"{name} does not sum to 1 (max deviation {float((sums - 1.0).abs().max()):.2e})")
    per_sample = -(p_gt * torch.log(p_rec.clamp(min=LOG_FLOOR))).sum(dim=-1)
    return per_sample.mean()


def semantic_consistency_loss(
    z_gt: torch.Tensor, z_rec: torch.Tensor, fer: Callable[[torch.Tensor], torch.Tensor]
) -> torch.Tensor:
    """
    Expression-distribution matching through a frozen classifier

    ``fer`` maps images to expression logits; it is not updated here.
    """
    _check_same_shape(z_gt, z_rec)
    with torch.no_grad():
        p_gt = torch.softmax(fer(z_gt), dim=-1)
    p_rec = torch.softmax(fer(z_rec), dim=-1)
    return semantic_consistency_from_probs(p_gt.to(p_rec.dtype), p_rec)


def lsgan_discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator objective; 0 at real -> 1, fake -> 0"""
    return 0.5 * ((real_logits - 1.0).pow(2).mean() + fake_logits.pow(2).mean())


def lsgan_generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * (fake_logits - 1.0).pow(2).mean()


class PatchDiscriminator(nn.Module):
    """Small least-squares patch discriminator; one logit per receptive patch"""

    def __init__(self, in_channels: int = 3, widths: Tuple[int, ...] = (32, 64, 64)):
        super().__init__()
        layers = []
        prev = in_channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class FeaturePatchDiscriminator(nn.Module):
    """Discriminator on frozen-encoder feature grids"""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def discriminator_losses(
    z_gt: torch.Tensor,
    z_rec: torch.Tensor,
    disc: nn.Module,
    feature_disc: nn.Module,
    features: Callable[[torch.Tensor], torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Generator-side adversarial terms (L_d, L_df)

    ``features`` is the frozen encoder whose output feature_disc judges.
    """
    _check_same_shape(z_gt, z_rec)
    l_d = lsgan_generator_loss(disc(z_rec))
    l_df = lsgan_generator_loss(feature_disc(features(z_rec)))
    return l_d, l_df


def discriminator_update_losses(
    z_gt: torch.Tensor,
    z_rec: torch.Tensor,
    disc: nn.Module,
    feature_disc: nn.Module,
    features: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Objective for the discriminator step; z_rec is detached"""
    z_rec = z_rec.detach()
    with torch.no_grad():
        f_gt, f_rec = features(z_gt), features(z_rec)
    image_term = lsgan_discriminator_loss(disc(z_gt), disc(z_rec))
    feature_term = lsgan_discriminator_loss(feature_disc(f_gt), feature_disc(f_rec))
    return image_term + feature_term
