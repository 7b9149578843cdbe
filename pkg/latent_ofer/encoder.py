"""
Feature extractors: the transformer patch embedder and the attention CNN
"""

import contextlib
import enum
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange
from einops.layers.torch import Rearrange

from .errors import DimensionMismatchError
from .patchgrid import OcclusionMask, PatchGrid, reassemble, to_tensor, validate_image

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def eval_mode(*modules: nn.Module) -> Iterator[None]:
    """Put modules in eval mode for the block, then restore every submodule's own flag"""
    previous = [(m, m.training) for module in modules for m in module.modules()]
    for module in modules:
        module.eval()
    try:
        yield
    finally:
        for m, training in previous:
            m.training = training


class LatentSource(str, enum.Enum):
    OCCLUDED_INPUT = "occluded-input"
    RECONSTRUCTION_PASS = "reconstruction-pass"


@dataclass
class LatentSet:
    """One D-dim latent per patch; row i belongs to patch i"""

    vectors: torch.Tensor
    rows: int
    cols: int
    source: LatentSource = LatentSource.OCCLUDED_INPUT

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] != self.rows * self.cols:
            raise DimensionMismatchError(
                f"LatentSet needs ({self.rows * self.cols}, D) vectors, got {tuple(self.vectors.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.vectors[index]

    def as_dict(self) -> Dict[int, torch.Tensor]:
        return {i: self.vectors[i] for i in range(len(self))}


@dataclass
class AttentionMap:
    """Nonnegative per-patch weights summing to 1"""

    weights: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.size != self.rows * self.cols:
            raise DimensionMismatchError(f"{self.weights.size} weights for a {self.rows}x{self.cols} grid")
        if (self.weights < 0).any():
            raise ValueError("Attention weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"Attention weights must sum to 1, got {self.weights.sum()}")

    @classmethod
    def uniform(cls, rows: int, cols: int) -> "AttentionMap":
        return cls(np.full(rows * cols, 1.0 / (rows * cols)), rows, cols)

    @classmethod
    def from_scores(cls, scores: np.ndarray, rows: int, cols: int) -> "AttentionMap":
        """Normalize nonnegative scores; all-zero scores give the uniform map"""
        scores = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), 0.0, None)
        total = scores.sum()
        if not np.isfinite(total) or total <= 0.0:
            return cls.uniform(rows, cols)
        return cls(scores / total, rows, cols)


@dataclass
class FeatureMap:
    """Refined CNN features for one image, shape (C, h, w)"""

    features: torch.Tensor

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return tuple(self.features.shape[1:])

    def pooled(self) -> torch.Tensor:
        return self.features.mean(dim=(1, 2))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(dim),
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden_dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MSA(nn.Module):
    """Multi-head self-attention with pre-norm"""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, dim * 3, bias=False)
        self.to_out = nn.Sequential(nn.Linear(dim, dim), nn.Dropout(dropout))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm(x)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in self.to_qkv(x).chunk(3, dim=-1))
        attn = self.dropout(torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * self.scale, dim=-1))
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.msa = MSA(dim, heads, dropout)
        self.mlp = MLP(dim, mlp_dim, dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.msa(x) + x
        return self.mlp(x) + x


class PatchEmbedder(nn.Module):
    """
    Transformer encoder over patch tokens

    Masked patches are replaced by a learned mask token before the
    positional embedding is added, so the encoder sees every position.
    """

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        channels: int = 3,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        mlp_dim: int = 128,
        dropout: float = 0.0,
        positional: bool = True,
    ):
        super().__init__()
        if image_size % patch_size != 0:
            raise DimensionMismatchError(f"Image size {image_size} must be divisible by patch size {patch_size}")

        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.dim = dim
        self.grid = image_size // patch_size
        self.num_patches = self.grid * self.grid
        self.positional = positional

        patch_dim = channels * patch_size * patch_size
        self.to_patch_embedding = nn.Sequential(
            Rearrange("b c (h p1) (w p2) -> b (h w) (p1 p2 c)", p1=patch_size, p2=patch_size),
            nn.LayerNorm(patch_dim),
            nn.Linear(patch_dim, dim),
            nn.LayerNorm(dim),
        )
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, self.num_patches, dim))
        self.blocks = nn.ModuleList([TransformerBlock(dim, heads, mlp_dim, dropout) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

        self.apply(self._init_module)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)

    @staticmethod
    def _init_module(module: nn.Module):
        if isinstance(module, nn.Linear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            images: (B, C, H, W)
            mask: (B, N) bool, True where the patch is hidden

        Returns:
            (B, N, D) latents
        """
        tokens = self.to_patch_embedding(images)
        if mask is not None:
            tokens = torch.where(mask.unsqueeze(-1), self.mask_token.expand_as(tokens), tokens)
        if self.positional:
            tokens = tokens + self.pos_embedding
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        avg_out = self.fc(x.mean(dim=(2, 3), keepdim=True))
        max_out = self.fc(x.amax(dim=(2, 3), keepdim=True))
        return torch.sigmoid(avg_out + max_out)


class SpatialAttention(nn.Module):
    """Bias-free spatial gate; replicate padding keeps a flat input flat"""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate", bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAMBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channel_attention = ChannelAttention(channels)
        self.spatial_attention = SpatialAttention()

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = x * self.channel_attention(x)
        gate = self.spatial_attention(x)
        return x * gate, gate


def conv_stage(in_channels: int, out_channels: int) -> nn.Sequential:
    """Stride-2 conv stage; halves the spatial size"""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, padding_mode="replicate", bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1, padding_mode="replicate", bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class AttentionCNN(nn.Module):
    """
    Convolutional branch with a CBAM block

    One stride-2 stage per halving, so the output resolution equals the
    patch grid and attention weights line up with latent indices.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        stages = []
        prev = in_channels
        for width in channels:
            stages.append(conv_stage(prev, width))
            prev = width
        self.stages = nn.Sequential(*stages)
        self.cbam = CBAMBlock(prev)
        self.out_channels = prev
        self.downsampling = 2 ** len(channels)

    def forward(self, images: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Returns:
            features: (B, C, h, w) refined feature map
            attention: (B, h * w) normalized spatial attention
        """
        features, gate = self.cbam(self.stages(images))
        weights = gate.flatten(1)
        return features, weights / weights.sum(dim=1, keepdim=True)


def grid_tensor(grid: PatchGrid) -> torch.Tensor:
    return to_tensor(reassemble(grid))


@torch.no_grad()
def embed_patches(embedder: PatchEmbedder, grid: PatchGrid, mask: Optional[OcclusionMask] = None) -> LatentSet:
    """Latent vector per patch from the transformer encoder (eval mode)"""
    if grid.patch_size != embedder.patch_size or len(grid) != embedder.num_patches:
        raise DimensionMismatchError(
            f"Grid of {len(grid)} patches of size {grid.patch_size} does not fit the embedder "
            f"({embedder.num_patches} patches of size {embedder.patch_size})"
        )
    flags = None
    source = LatentSource.OCCLUDED_INPUT
    if mask is not None:
        if (mask.rows, mask.cols) != grid.shape:
            raise DimensionMismatchError(f"Mask {mask.rows}x{mask.cols} does not match grid {grid.shape}")
        flags = torch.from_numpy(mask.flags).unsqueeze(0)
        source = LatentSource.RECONSTRUCTION_PASS
    with eval_mode(embedder):
        vectors = embedder(grid_tensor(grid), flags)[0]
    return LatentSet(vectors, grid.grid_rows, grid.grid_cols, source)


@torch.no_grad()
def cnn_forward(model: AttentionCNN, image: np.ndarray) -> Tuple[FeatureMap, AttentionMap]:
    """Refined feature map and normalized attention map for one image"""
    image = validate_image(image, model.downsampling)
    with eval_mode(model):
        features, weights = model(to_tensor(image))
    rows, cols = features.shape[2:]
    return FeatureMap(features[0]), AttentionMap.from_scores(weights[0].double().numpy(), rows, cols)
