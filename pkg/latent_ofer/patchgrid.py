"""
Patch partitioning and occlusion synthesis

Images are H x W x C float arrays in [0, 1]. Patches are numbered in
row-major raster order everywhere in the package.
"""

import json
import logging
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Tuple

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import DataError, DimensionMismatchError

if TYPE_CHECKING:
    from .encoder import AttentionMap

logger = logging.getLogger(__name__)

FILL_VALUE = 0.5
COVERAGE_THRESHOLD = 0.25
PROTOCOLS = ("random", "grad")


@dataclass(frozen=True)
class PatchGrid:
    """Square patches of one image, shape (rows * cols, P, P, C)"""

    patches: np.ndarray
    grid_rows: int
    grid_cols: int
    patch_size: int

    def __post_init__(self):
        if self.grid_rows * self.grid_cols != len(self.patches):
            raise DimensionMismatchError(
                f"{self.grid_rows}x{self.grid_cols} grid does not hold {len(self.patches)} patches"
            )

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def channels(self) -> int:
        return self.patches.shape[-1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid_rows, self.grid_cols


@dataclass
class OcclusionMask:
    """Per-patch occlusion flags (True = occluded), row-major"""

    flags: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        if self.flags.size != self.rows * self.cols:
            raise DimensionMismatchError(f"{self.flags.size} flags for a {self.rows}x{self.cols} grid")

    @classmethod
    def empty(cls, rows: int, cols: int) -> "OcclusionMask":
        return cls(np.zeros(rows * cols, dtype=bool), rows, cols)

    @property
    def proportion(self) -> float:
        return float(self.flags.sum()) / self.flags.size

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "flags": [int(v) for v in self.flags]}

    @classmethod
    def from_dict(cls, data: dict) -> "OcclusionMask":
        return cls(np.asarray(data["flags"], dtype=bool), int(data["rows"]), int(data["cols"]))

    def save(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "OcclusionMask":
        if not os.path.exists(path):
            raise DataError(f"Mask file not found: {path}", code="missing-file")
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


def validate_image(image: np.ndarray, patch_size: Optional[int] = None) -> np.ndarray:
    """Check an H x W x C image in [0, 1], optionally patch aligned"""
    image = np.asarray(image)
    if image.ndim != 3 or min(image.shape) <= 0:
        raise DimensionMismatchError(f"Image must be H x W x C, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("Image values must lie in [0, 1]")
    if patch_size is not None:
        height, width = image.shape[:2]
        if height % patch_size != 0 or width % patch_size != 0:
            raise DimensionMismatchError(
                f"Image dimensions ({height},{width}) must be divisible by patch_size ({patch_size})"
            )
    return image


def partition(image: np.ndarray, patch_size: int) -> PatchGrid:
    """Split an image into raster-ordered patches"""
    image = validate_image(image, patch_size)
    height, width, channels = image.shape
    rows, cols = height // patch_size, width // patch_size
    patches = (
        image.reshape(rows, patch_size, cols, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, patch_size, patch_size, channels)
    )
    return PatchGrid(patches.copy(), rows, cols, patch_size)


def reassemble(grid: PatchGrid) -> np.ndarray:
    """Exact inverse of partition"""
    p = grid.patch_size
    return (
        grid.patches.reshape(grid.grid_rows, grid.grid_cols, p, p, grid.channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(grid.grid_rows * p, grid.grid_cols * p, grid.channels)
        .copy()
    )


def occluded_count(proportion: float, num_patches: int) -> int:
    """round(proportion * num_patches), halves rounded up"""
    if not 0.0 <= proportion <= 1.0:
        raise ValueError(f"proportion must be in [0, 1], got {proportion}")
    return int(np.floor(proportion * num_patches + 0.5))


def fill_patches(image: np.ndarray, mask: OcclusionMask, patch_size: int, value: float = FILL_VALUE) -> np.ndarray:
    """Copy of image with every flagged patch set to value"""
    grid = partition(image, patch_size)
    if grid.shape != (mask.rows, mask.cols):
        raise DimensionMismatchError(f"Mask {mask.rows}x{mask.cols} does not match grid {grid.shape}")
    patches = grid.patches.copy()
    patches[mask.flags] = value
    return reassemble(PatchGrid(patches, grid.grid_rows, grid.grid_cols, patch_size))


def random_sampling_occlusion(
    image: np.ndarray, proportion: float, seed: int, patch_size: int = 16
) -> Tuple[np.ndarray, OcclusionMask]:
    """Fill a seeded uniform sample of round(proportion * N) patches with mid-gray"""
    grid = partition(image, patch_size)
    count = occluded_count(proportion, len(grid))
    rng = np.random.default_rng(seed)
    flags = np.zeros(len(grid), dtype=bool)
    flags[rng.choice(len(grid), size=count, replace=False)] = True
    mask = OcclusionMask(flags, grid.grid_rows, grid.grid_cols)
    return fill_patches(image, mask, patch_size), mask


def top_patches(weights: np.ndarray, count: int) -> np.ndarray:
    """Indices of the count largest weights; ties go to the lower index"""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(weights.size), -weights))
    return order[:count]


def grad_occlusion(
    image: np.ndarray, proportion: float, attention: "AttentionMap", patch_size: int = 16
) -> Tuple[np.ndarray, OcclusionMask]:
    """Fill the round(proportion * N) patches with the highest attention weight"""
    grid = partition(image, patch_size)
    if (attention.rows, attention.cols) != grid.shape:
        raise DimensionMismatchError(
            f"Attention grid {attention.rows}x{attention.cols} does not match image grid {grid.shape}"
        )
    count = occluded_count(proportion, len(grid))
    flags = np.zeros(len(grid), dtype=bool)
    flags[top_patches(attention.weights, count)] = True
    mask = OcclusionMask(flags, grid.grid_rows, grid.grid_cols)
    return fill_patches(image, mask, patch_size), mask


def synth_occlude(
    image: np.ndarray,
    occluder: np.ndarray,
    position: Tuple[int, int],
    patch_size: int = 16,
    threshold: float = COVERAGE_THRESHOLD,
) -> Tuple[np.ndarray, OcclusionMask]:
    """
    Alpha-composite an RGBA occluder at (row, col)

    A patch is flagged when the fraction of its pixels with alpha > 0
    exceeds threshold.
    """
    image = validate_image(image, patch_size)
    occluder = np.asarray(occluder, dtype=image.dtype)
    if occluder.ndim != 3 or occluder.shape[-1] != image.shape[-1] + 1:
        raise DimensionMismatchError(f"Occluder must be h x w x {image.shape[-1] + 1}, got {occluder.shape}")

    row, col = position
    height, width = occluder.shape[:2]
    if row < 0 or col < 0 or row + height > image.shape[0] or col + width > image.shape[1]:
        raise ValueError(f"Occluder of size {height}x{width} at {position} leaves the {image.shape[:2]} image")

    out = image.copy()
    alpha = occluder[..., -1:]
    region = out[row:row + height, col:col + width]
    out[row:row + height, col:col + width] = alpha * occluder[..., :-1] + (1.0 - alpha) * region

    coverage = np.zeros(image.shape[:2], dtype=np.float64)
    coverage[row:row + height, col:col + width] = alpha[..., 0] > 0
    rows, cols = image.shape[0] // patch_size, image.shape[1] // patch_size
    fractions = coverage.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))
    mask = OcclusionMask((fractions > threshold).reshape(-1), rows, cols)
    return np.clip(out, 0.0, 1.0), mask


def occlude(
    image: np.ndarray,
    protocol: str,
    proportion: float,
    seed: int = 0,
    attention: Optional["AttentionMap"] = None,
    patch_size: int = 16,
) -> Tuple[np.ndarray, OcclusionMask]:
    """Apply one of the evaluation protocols ("random" or "grad")"""
    if protocol == "random":
        return random_sampling_occlusion(image, proportion, seed, patch_size)
    if protocol == "grad":
        if attention is None:
            raise ValueError("grad occlusion needs an attention map")
        return grad_occlusion(image, proportion, attention, patch_size)
    raise ValueError(f"Unknown occlusion protocol: {protocol}")


def mask_to_pixels(flags: torch.Tensor, rows: int, cols: int, patch_size: int) -> torch.Tensor:
    """(B, N) patch flags -> (B, 1, H, W) pixel mask"""
    grid = flags.reshape(flags.shape[0], 1, rows, cols)
    return grid.repeat_interleave(patch_size, dim=2).repeat_interleave(patch_size, dim=3)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x C array -> 1 x C x H x W float tensor"""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def to_image(tensor: torch.Tensor, dtype: np.dtype = np.float32) -> np.ndarray:
    """1 x C x H x W (or C x H x W) tensor -> H x W x C array of the given dtype"""
    if tensor.dim() == 4:
        tensor = tensor[0]
    return tensor.detach().cpu().permute(1, 2, 0).numpy().astype(dtype)


def load_image(path: str) -> np.ndarray:
    """Read an 8-bit PNG as float32 RGB in [0, 1]"""
    if not os.path.exists(path):
        raise DataError(f"Image not found: {path}", code="missing-file")
    try:
        with PILImage.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read image {path}: {e}", code="unreadable-image")
    return array / 255.0


def save_image(image: np.ndarray, path: str):
    """Write an image in [0, 1] as 8-bit PNG"""
    array = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    PILImage.fromarray(array).save(path, format="PNG")
