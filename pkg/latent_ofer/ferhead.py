"""
Expression recognition head

The CNN branch yields a refined feature map and a spatial attention map
at patch-grid resolution. The top half of patches by attention are the
keys used to read transformer latents; pooled CNN features and pooled
selected latents are concatenated and classified into seven expressions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .config import epoch_batches
from .encoder import AttentionCNN, AttentionMap, FeatureMap, LatentSet, cnn_forward, embed_patches, eval_mode
from .errors import DataError, DimensionMismatchError, ModelError
from .patchgrid import partition, to_tensor, top_patches
from .quality import psnr
from .reconstruct import reconstruct
from .svdd import classify_patches

logger = logging.getLogger(__name__)

EXPRESSIONS = ("neutral", "happy", "sad", "surprise", "fear", "disgust", "anger")
NUM_EXPRESSIONS = len(EXPRESSIONS)
FUSIONS = ("full", "extracted", "cnn", "cnn+full", "cnn+extracted")
SELECTION_FRACTION = 0.5
TOP_HALF_RULE = "top-half-count"


@dataclass
class ExpressionDistribution:
    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).reshape(-1)
        if self.probabilities.size != NUM_EXPRESSIONS:
            raise DimensionMismatchError(f"Expected {NUM_EXPRESSIONS} probabilities, got {self.probabilities.size}")
        if (self.probabilities < 0).any() or abs(self.probabilities.sum() - 1.0) > 1e-6:
            raise ValueError("Expression probabilities must be nonnegative and sum to 1")

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "ExpressionDistribution":
        return cls(torch.softmax(logits.detach().double().reshape(-1), dim=0).numpy())

    @property
    def label(self) -> int:
        return int(np.argmax(self.probabilities))

    @property
    def name(self) -> str:
        return EXPRESSIONS[self.label]


@dataclass
class LatentSelection:
    """Selected patch indices (ascending) and their latent vectors"""

    keys: Tuple[int, ...]
    values: torch.Tensor
    rule: str = TOP_HALF_RULE

    def __post_init__(self):
        if self.values.shape[0] != len(self.keys):
            raise DimensionMismatchError(f"{len(self.keys)} keys but {self.values.shape[0]} values")

    def __len__(self) -> int:
        return len(self.keys)


def selection_count(num_patches: int, fraction: float = SELECTION_FRACTION) -> int:
    return int(math.ceil(fraction * num_patches))


def select_latents(latents: LatentSet, attention: AttentionMap, fraction: float = SELECTION_FRACTION) -> LatentSelection:
    """
    Keys = top ceil(fraction * N) patches by attention weight

    Rank based, so ties at the cutoff go to the lower index and any strictly
    monotone rescaling of the weights selects the same keys.
    """
    if (latents.rows, latents.cols) != (attention.rows, attention.cols):
        raise DimensionMismatchError(
            f"Latent grid {latents.rows}x{latents.cols} does not match attention grid {attention.rows}x{attention.cols}"
        )
    keys = tuple(sorted(int(k) for k in top_patches(attention.weights, selection_count(len(latents), fraction))))
    return LatentSelection(keys, latents.vectors[list(keys)])


def full_selection(latents: LatentSet) -> LatentSelection:
    return LatentSelection(tuple(range(len(latents))), latents.vectors, rule="all")


def top_fraction_mask(attention: torch.Tensor, fraction: float = SELECTION_FRACTION) -> torch.Tensor:
    """(B, N) 0/1 weights marking each row's top ceil(fraction * N) entries"""
    count = selection_count(attention.shape[1], fraction)
    order = torch.sort(attention.detach(), dim=1, descending=True, stable=True).indices
    mask = torch.zeros_like(attention)
    return mask.scatter(1, order[:, :count], 1.0)


class ExpressionNet(nn.Module):
    """
    Attention CNN plus a linear head over the fused vector

    fusion picks the inputs of the head: "cnn" (pooled CNN features),
    "full"/"extracted" (pooled latents of all / top-half patches) or the
    "cnn+..." concatenations.
    """

    def __init__(
        self,
        fusion: str = "cnn+extracted",
        latent_dim: int = 64,
        cnn_channels: Sequence[int] = (16, 32, 64, 64),
        in_channels: int = 3,
        fraction: float = SELECTION_FRACTION,
    ):
        super().__init__()
        if fusion not in FUSIONS:
            raise ValueError(f"Unknown fusion '{fusion}', expected one of {FUSIONS}")
        self.fusion = fusion
        self.latent_dim = latent_dim
        self.cnn_channels = list(cnn_channels)
        self.fraction = fraction
        self.num_classes = NUM_EXPRESSIONS
        self.uses_cnn = fusion.startswith("cnn")
        self.uses_latents = fusion != "cnn"
        self.extracted = fusion.endswith("extracted")
        self.cnn_frozen = False

        self.cnn = AttentionCNN(in_channels, cnn_channels)
        self.feature_channels = self.cnn.out_channels
        head_dim = (self.feature_channels if self.uses_cnn else 0) + (latent_dim if self.uses_latents else 0)
        self.head = nn.Linear(head_dim, NUM_EXPRESSIONS)

    def freeze_cnn(self):
        for param in self.cnn.parameters():
            param.requires_grad_(False)
        self.cnn_frozen = True
        self.cnn.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.cnn_frozen:
            self.cnn.eval()
        return self

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) refined CNN features"""
        return self.cnn(images)[0]

    def classify_vectors(self, cnn_vector: Optional[torch.Tensor], latent_vector: Optional[torch.Tensor]) -> torch.Tensor:
        parts = []
        if self.uses_cnn:
            parts.append(cnn_vector)
        if self.uses_latents:
            if latent_vector is None:
                raise ValueError(f"Fusion '{self.fusion}' needs latent vectors")
            if latent_vector.shape[-1] != self.latent_dim:
                raise DimensionMismatchError(f"Latent dim {latent_vector.shape[-1]} != {self.latent_dim}")
            parts.append(latent_vector)
        return self.head(torch.cat(parts, dim=1))

    def forward(self, images: torch.Tensor, latents: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            images: (B, C, H, W)
            latents: (B, N, D) transformer latents, required unless fusion is "cnn"

        Returns:
            (B, 7) logits
        """
        features, attention = self.cnn(images)
        latent_vector = None
        if self.uses_latents:
            if latents is None:
                raise ValueError(f"Fusion '{self.fusion}' needs latent vectors")
            if latents.shape[1] != attention.shape[1]:
                raise DimensionMismatchError(
                    f"{latents.shape[1]} latents for an attention grid of {attention.shape[1]} cells"
                )
            if self.extracted:
                weights = top_fraction_mask(attention, self.fraction)
            else:
                weights = torch.ones_like(attention)
            weights = weights.to(latents.dtype).unsqueeze(-1)
            latent_vector = (weights * latents).sum(dim=1) / weights.sum(dim=1)
        return self.classify_vectors(features.mean(dim=(2, 3)), latent_vector)

    def save(self, path: str, history: Optional[List[Dict[str, float]]] = None):
        meta = {
            "fusion": self.fusion,
            "latent_dim": self.latent_dim,
            "cnn_channels": self.cnn_channels,
            "fraction": self.fraction,
            "history": history or [],
        }
        save_checkpoint(path, dict(self.state_dict()), kind="fer", meta=meta)

    @classmethod
    def load(cls, path: str) -> "ExpressionNet":
        tensors, meta = load_checkpoint(path, kind="fer")
        model = cls(meta["fusion"], meta["latent_dim"], meta["cnn_channels"], fraction=meta["fraction"])
        model.load_state_dict(tensors)
        model.eval()
        return model


@torch.no_grad()
def fuse_and_classify(model: ExpressionNet, features: FeatureMap, selection: LatentSelection) -> ExpressionDistribution:
    """Concatenate pooled CNN features with the mean selected latent, then classify"""
    cnn_vector = features.pooled().unsqueeze(0)
    if len(selection) == 0:
        latent_vector = torch.zeros(1, model.latent_dim, dtype=cnn_vector.dtype)
    else:
        latent_vector = selection.values.mean(dim=0, keepdim=True).to(cnn_vector.dtype)
    with eval_mode(model):
        logits = model.classify_vectors(cnn_vector, latent_vector)[0]
    return ExpressionDistribution.from_logits(logits)


def grad_cam(
    model: nn.Module,
    image: np.ndarray,
    target_class: int,
    layer: Optional[nn.Module] = None,
    latents: Optional[torch.Tensor] = None,
) -> AttentionMap:
    """
    Gradient-weighted class activation map at the layer's resolution

    Channel weights are the spatially averaged gradients of the target
    logit; the map is relu(sum_k w_k A_k), normalized. A map with no mass
    falls back to uniform.
    """
    num_classes = getattr(model, "num_classes", NUM_EXPRESSIONS)
    if not 0 <= int(target_class) < num_classes:
        raise ValueError(f"target_class must be in [0, {num_classes}), got {target_class}")
    layer = layer if layer is not None else model.cnn

    store: Dict[str, torch.Tensor] = {}

    def save_activation(module, inputs, output):
        activation = output[0] if isinstance(output, tuple) else output
        store["activation"] = activation
        if activation.requires_grad:
            activation.register_hook(lambda grad: store.__setitem__("gradient", grad))

    handle = layer.register_forward_hook(save_activation)
    try:
        x = to_tensor(image).requires_grad_(True)
        with torch.enable_grad(), eval_mode(model):
            logits = model(x) if latents is None else model(x, latents)
            model.zero_grad(set_to_none=True)
            logits[0, int(target_class)].backward()
    finally:
        handle.remove()

    activation = store["activation"].detach()[0]
    rows, cols = activation.shape[1:]
    gradient = store.get("gradient")
    if gradient is None:
        return AttentionMap.uniform(rows, cols)
    weights = gradient[0].mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * activation).sum(dim=0))
    return AttentionMap.from_scores(cam.double().numpy(), rows, cols)


def train_expression_net(
    images: np.ndarray,
    labels: np.ndarray,
    fusion: str = "cnn",
    latents: Optional[torch.Tensor] = None,
    init_from: Optional[ExpressionNet] = None,
    latent_dim: int = 64,
    cnn_channels: Sequence[int] = (16, 32, 64, 64),
    epochs: int = 25,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> Tuple[ExpressionNet, List[Dict[str, float]]]:
    """
    Cross-entropy training of one fusion variant

    Args:
        images: (n, H, W, C) clean images
        labels: (n,) expression indices
        latents: (n, N, D) transformer latents for latent fusions
        init_from: trained model whose CNN weights warm-start this one;
            latent-only fusions keep that CNN frozen

    Returns:
        (model, per-epoch history of loss and training accuracy)
    """
    if len(images) == 0:
        raise ValueError("Cannot train an expression network on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(images):
        raise DimensionMismatchError(f"{len(images)} images but {len(labels)} labels")

    torch.manual_seed(seed)
    model = ExpressionNet(fusion, latent_dim, cnn_channels, in_channels=images.shape[-1])
    if model.uses_latents and latents is None:
        raise ValueError(f"Fusion '{fusion}' needs precomputed latents")
    if init_from is not None:
        model.cnn.load_state_dict(init_from.cnn.state_dict())
        if not model.uses_cnn:
            model.freeze_cnn()
    elif not model.uses_cnn:
        raise ValueError(f"Fusion '{fusion}' reads keys from a trained CNN; pass init_from")

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=lr)
    criterion = nn.CrossEntropyLoss()
    history: List[Dict[str, float]] = []

    for epoch in range(epochs):
        model.train()
        total, correct, batches = 0.0, 0, 0
        progress = tqdm(
            epoch_batches(len(images), batch_size, seed, epoch),
            total=math.ceil(len(images) / batch_size),
            desc=f"fer[{fusion}] {epoch + 1}/{epochs}",
            leave=False,
        )
        for index in progress:
            x = torch.from_numpy(np.ascontiguousarray(images[index], dtype=np.float32)).permute(0, 3, 1, 2)
            y = torch.from_numpy(labels[index])
            batch_latents = latents[torch.from_numpy(index)] if latents is not None else None
            logits = model(x, batch_latents)
            loss = criterion(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            correct += int((logits.argmax(dim=1) == y).sum())
            batches += 1
        history.append({"loss": total / batches, "accuracy": correct / len(images)})
        logger.info(
            "fer[%s] epoch %d/%d loss %.5f acc %.4f",
            fusion, epoch + 1, epochs, history[-1]["loss"], history[-1]["accuracy"],
        )

    model.eval()
    return model, history


@dataclass
class PipelineModels:
    """Trained stages for predict_pipeline; the detector and the FER head read the reconstructor's encoder"""

    detector: Any = None
    reconstructor: Any = None
    fer: Optional[ExpressionNet] = None

    def require(self):
        if self.reconstructor is None:
            raise ModelError("reconstructor")
        if self.detector is None:
            raise ModelError("svdd")
        if self.fer is None:
            raise ModelError("fer")


@dataclass
class Prediction:
    label: int
    distribution: ExpressionDistribution
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "expression": EXPRESSIONS[self.label],
            "probabilities": [float(p) for p in self.distribution.probabilities],
            "occluded_patch_indices": self.diagnostics.get("occluded_patch_indices", []),
            "selected_keys": self.diagnostics.get("selected_keys", []),
        }


def classify_image(
    fer: ExpressionNet, image: np.ndarray, latents: Optional[LatentSet]
) -> Tuple[ExpressionDistribution, LatentSelection]:
    """cnn_forward -> select -> fuse for one image"""
    features, attention = cnn_forward(fer.cnn, image)
    if latents is None:
        selection = LatentSelection((), torch.zeros(0, fer.latent_dim), rule="none")
    elif fer.extracted:
        selection = select_latents(latents, attention, fer.fraction)
    else:
        selection = full_selection(latents)
    return fuse_and_classify(fer, features, selection), selection


def predict_pipeline(image: np.ndarray, models: PipelineModels, reconstruction: bool = True) -> Prediction:
    """
    detect -> mask -> reconstruct -> select -> classify

    With reconstruction disabled the FER head reads the occluded input and
    its latents directly.
    """
    models.require()
    recon = models.reconstructor
    grid = partition(image, recon.patch_size)
    mask, scores = classify_patches(embed_patches(recon.embedder, grid), models.detector)

    if mask.flags.all():
        raise DataError("Every patch was flagged as occluded; nothing to reconstruct from", code="fully-occluded")

    if reconstruction:
        result = reconstruct(recon, image, mask)
        restored, latents = result.refined, result.latents
    else:
        restored, latents = image, embed_patches(recon.embedder, grid)

    distribution, selection = classify_image(models.fer, restored, latents if models.fer.uses_latents else None)
    diagnostics = {
        "mask": mask.to_dict(),
        "occluded_patch_indices": [int(i) for i in mask.indices],
        "psnr_vs_input": psnr(image, restored),
        "selected_keys": list(selection.keys),
        "distances": [s.distance for s in scores],
    }
    return Prediction(distribution.label, distribution, diagnostics)
