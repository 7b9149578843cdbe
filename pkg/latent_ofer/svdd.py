"""
ViT-SVDD occlusion detector

A bias-free projection network maps frozen transformer latents of
unoccluded patches close to a hypersphere center c. A patch whose
projected distance to c exceeds the radius R is occluded.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import epoch_batches
from .encoder import LatentSet, PatchEmbedder, embed_patches, eval_mode
from .errors import DimensionMismatchError
from .patchgrid import OcclusionMask, partition

logger = logging.getLogger(__name__)

CENTER_EPS = 0.1


class SvddNet(nn.Module):
    """Two-layer projection without bias terms"""

    def __init__(self, input_dim: int, hidden_dim: int = 128, out_dim: int = 32):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden_dim, bias=False),
            nn.LeakyReLU(),
            nn.Linear(hidden_dim, out_dim, bias=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


@dataclass
class SvddModel:
    """Projection network W, center c, radius R and weight decay lambda"""

    net: nn.Module
    center: torch.Tensor
    radius: float = 0.0
    weight_decay: float = 1e-6
    quantile: float = 0.99
    n_train: int = 0
    input_dim: Optional[int] = None
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be nonnegative, got {self.radius}")
        if self.weight_decay <= 0:
            raise ValueError(f"weight_decay must be positive, got {self.weight_decay}")
        if not torch.isfinite(self.center).all():
            raise ValueError("center must be finite")
        if self.input_dim is None:
            self.input_dim = getattr(self.net, "input_dim", self.center.numel())

    def sidecar(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "radius": float(self.radius),
            "quantile": float(self.quantile),
            "lambda": float(self.weight_decay),
        }

    def save(self, path: str):
        """Checkpoint plus a JSON sidecar next to it"""
        net = self.net
        meta = {
            "input_dim": net.input_dim,
            "hidden_dim": net.hidden_dim,
            "out_dim": net.out_dim,
            "n_train": self.n_train,
            "loss_history": self.loss_history,
            **self.sidecar(),
        }
        tensors = dict(net.state_dict())
        tensors["center"] = self.center
        save_checkpoint(path, tensors, kind="svdd", meta=meta)
        with open(os.path.splitext(path)[0] + ".json", "w") as f:
            json.dump(self.sidecar(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "SvddModel":
        tensors, meta = load_checkpoint(path, kind="svdd")
        net = SvddNet(meta["input_dim"], meta["hidden_dim"], meta["out_dim"])
        center = tensors.pop("center")
        net.load_state_dict(tensors)
        net.eval()
        return cls(
            net=net,
            center=center,
            radius=meta["radius"],
            weight_decay=meta["lambda"],
            quantile=meta["quantile"],
            n_train=meta["n_train"],
            loss_history=list(meta["loss_history"]),
        )


@dataclass(frozen=True)
class PatchScore:
    index: int
    distance: float
    occluded: bool


@dataclass(frozen=True)
class DetectionMetrics:
    """Occluded patches are the positive class"""

    accuracy: float
    precision: float
    recall: float
    undefined: Tuple[str, ...] = ()

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.accuracy, self.precision, self.recall


def init_center(representations: torch.Tensor, eps: float = CENTER_EPS) -> torch.Tensor:
    """Mean representation with near-zero coordinates pushed to +/-eps"""
    if representations.numel() == 0 or representations.shape[0] == 0:
        raise ValueError("Cannot initialize the center from an empty set")
    center = representations.detach().mean(dim=0)
    small = center.abs() < eps
    center = torch.where(small & (center < 0), torch.full_like(center, -eps), center)
    center = torch.where(small & (center >= 0), torch.full_like(center, eps), center)
    return center


def weight_penalty(net: nn.Module) -> torch.Tensor:
    """Sum of squared Frobenius norms over all weights"""
    total = None
    for param in net.parameters():
        term = param.pow(2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def svdd_loss(latents: torch.Tensor, model: SvddModel) -> torch.Tensor:
    """(1/n) sum ||phi(x_i; W) - c||^2 + (lambda/2) sum_l ||w^l||_F^2"""
    if latents.dim() != 2 or latents.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"Expected (n, {model.input_dim}) latents, got {tuple(latents.shape)}")
    projected = model.net(latents)
    if projected.shape[1] != model.center.numel():
        raise DimensionMismatchError(
            f"Projection dim {projected.shape[1]} does not match center dim {model.center.numel()}"
        )
    dist = (projected - model.center.to(projected.dtype)).pow(2).sum(dim=1)
    penalty = weight_penalty(model.net).to(dist.dtype)
    return dist.mean() + 0.5 * model.weight_decay * penalty


@torch.no_grad()
def distances(latents: torch.Tensor, model: SvddModel) -> torch.Tensor:
    """||phi(x) - c|| for each row"""
    if latents.dim() != 2 or latents.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"Expected (n, {model.input_dim}) latents, got {tuple(latents.shape)}")
    with eval_mode(model.net):
        return (model.net(latents) - model.center.to(latents.dtype)).norm(dim=1)


def determine_radius(train_distances: Sequence[float], quantile: float = 0.99) -> float:
    """q-quantile of training distances, linear interpolation between order statistics"""
    values = np.asarray(train_distances, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("Cannot determine a radius from no distances")
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {quantile}")
    return float(np.quantile(values, quantile))


def train_svdd(
    unoccluded_latents: torch.Tensor,
    hidden_dim: int = 128,
    out_dim: int = 32,
    weight_decay: float = 1e-6,
    quantile: float = 0.99,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 256,
    seed: int = 0,
) -> SvddModel:
    """
    Fit the one-class objective on latents of unoccluded patches

    Args:
        unoccluded_latents: (n, D) latents, every row from an unoccluded patch

    Returns:
        SvddModel with the radius set from the training distances
    """
    if unoccluded_latents.dim() != 2 or unoccluded_latents.shape[0] == 0:
        raise ValueError("train_svdd needs a non-empty (n, D) latent dataset")

    torch.manual_seed(seed)
    latents = unoccluded_latents.detach().to(torch.float32)
    net = SvddNet(latents.shape[1], hidden_dim, out_dim)

    with torch.no_grad():
        net.eval()
        center = init_center(net(latents))

    model = SvddModel(net=net, center=center, weight_decay=weight_decay, quantile=quantile, n_train=len(latents))
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)

    for epoch in range(epochs):
        net.train()
        total, batches = 0.0, 0
        progress = tqdm(
            epoch_batches(len(latents), batch_size, seed, epoch),
            total=math.ceil(len(latents) / batch_size),
            desc=f"svdd {epoch + 1}/{epochs}",
            leave=False,
        )
        for index in progress:
            batch = latents[torch.from_numpy(index)]
            loss = svdd_loss(batch, model)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        model.loss_history.append(total / batches)
        logger.info("svdd epoch %d/%d loss %.6f", epoch + 1, epochs, model.loss_history[-1])

    net.eval()
    model.radius = determine_radius(distances(latents, model).numpy(), quantile)
    logger.info("svdd radius %.6f at quantile %.3f over %d latents", model.radius, quantile, len(latents))
    return model


def classify_patches(latents: LatentSet, model: SvddModel) -> Tuple[OcclusionMask, List[PatchScore]]:
    """Flag each patch whose distance strictly exceeds the radius"""
    if latents.dim != model.input_dim:
        raise DimensionMismatchError(f"Latent dim {latents.dim} does not match detector dim {model.input_dim}")
    dist = distances(latents.vectors, model).numpy()
    flags = dist > model.radius
    scores = [PatchScore(i, float(d), bool(f)) for i, (d, f) in enumerate(zip(dist, flags))]
    return OcclusionMask(flags, latents.rows, latents.cols), scores


def detect_occlusion(
    embedder: PatchEmbedder, model: SvddModel, image: np.ndarray
) -> Tuple[OcclusionMask, List[PatchScore]]:
    """partition -> embed -> classify for one image"""
    grid = partition(image, embedder.patch_size)
    return classify_patches(embed_patches(embedder, grid), model)


def _ratio(numerator: int, denominator: int, name: str, undefined: List[str]) -> float:
    if denominator == 0:
        undefined.append(name)
        return 1.0
    return numerator / denominator


def detection_metrics(predicted: OcclusionMask, truth: OcclusionMask) -> DetectionMetrics:
    """Accuracy, precision and recall with occluded as positive"""
    return detection_metrics_from_flags(predicted.flags, truth.flags)


def detection_metrics_from_flags(predicted: np.ndarray, truth: np.ndarray) -> DetectionMetrics:
    """Same as detection_metrics over flat flag arrays (pooled over many images)"""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise DimensionMismatchError(f"Predicted shape {predicted.shape} does not match truth {truth.shape}")

    tp = int(np.sum(predicted & truth))
    fp = int(np.sum(predicted & ~truth))
    fn = int(np.sum(~predicted & truth))
    undefined: List[str] = []
    accuracy = _ratio(int(np.sum(predicted == truth)), predicted.size, "accuracy", undefined)
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    if undefined:
        logger.warning("Zero denominator for %s; reported as 1.0", ", ".join(undefined))
    return DetectionMetrics(accuracy, precision, recall, tuple(undefined))


def collect_unoccluded_latents(embedder: PatchEmbedder, images: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    """Latents of every patch of clean images, stacked to (n_images * N, D)"""
    chunks = []
    with torch.no_grad(), eval_mode(embedder):
        for start in range(0, len(images), batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size])).permute(0, 3, 1, 2)
            chunks.append(embedder(batch.float()).reshape(-1, embedder.dim))
    if not chunks:
        raise ValueError("No images to collect latents from")
    latents = torch.cat(chunks)
    if not math.isfinite(float(latents.abs().max())):
        raise ValueError("Non-finite latents from the embedder")
    return latents
