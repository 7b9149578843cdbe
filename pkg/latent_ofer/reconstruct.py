"""
Hybrid reconstruction network

Stage one predicts every patch from the transformer (masked tokens
replaced by a learned mask token). Stage two refines the masked region
with a U-Net whose bottleneck runs at patch-grid resolution and holds the
self-assembly layer. Unmasked pixels always come straight from the input.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops.layers.torch import Rearrange
from tqdm import tqdm

from .assembly import ConventionalBlock, SelfAssembly
from .checkpoint import load_checkpoint, pack_optimizer, prefixed, save_checkpoint, unpack_optimizer, unprefixed
from .config import epoch_batches
from .encoder import LatentSet, LatentSource, PatchEmbedder, eval_mode
from .errors import DimensionMismatchError
from .losses import (
    FeaturePatchDiscriminator,
    LossParts,
    LossWeights,
    PatchDiscriminator,
    consistency_loss,
    discriminator_losses,
    discriminator_update_losses,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    reconstruction_loss,
    semantic_consistency_loss,
    total_loss,
)
from .patchgrid import (
    FILL_VALUE,
    OcclusionMask,
    PatchGrid,
    mask_to_pixels,
    occluded_count,
    partition,
    reassemble,
    to_image,
    to_tensor,
    validate_image,
)
from .quality import image_quality, mean_psnr, psnr

logger = logging.getLogger(__name__)

ASSEMBLY_KINDS = ("self-assembly", "conv")


class CoarseReconstructor(nn.Module):
    """Transformer encoder plus a linear per-token pixel head"""

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        channels: int = 3,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        mlp_dim: int = 128,
    ):
        super().__init__()
        self.embedder = PatchEmbedder(image_size, patch_size, channels, dim, depth, heads, mlp_dim)
        grid = image_size // patch_size
        self.head = nn.Linear(dim, patch_size * patch_size * channels)
        self.to_image = Rearrange(
            "b (h w) (p1 p2 c) -> b c (h p1) (w p2)", h=grid, w=grid, p1=patch_size, p2=patch_size
        )

    def forward(self, images: torch.Tensor, flags: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns the (B, C, H, W) prediction in [0, 1] and the (B, N, D) latents"""
        latents = self.embedder(images, flags)
        return torch.sigmoid(self.to_image(self.head(latents))), latents


def cbr(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class RefinementUNet(nn.Module):
    """
    U-Net over the coarse composite plus a mask plane

    One max-pool per level brings the bottleneck to the patch grid, where
    masked cells are regenerated by the assembly block.
    """

    def __init__(
        self,
        grid: Tuple[int, int],
        channels: int = 3,
        widths: Sequence[int] = (16, 32, 64, 64),
        assembly: str = "self-assembly",
    ):
        super().__init__()
        if assembly not in ASSEMBLY_KINDS:
            raise ValueError(f"Unknown assembly block: {assembly}")
        self.grid = grid
        self.assembly_kind = assembly

        self.encoders = nn.ModuleList()
        prev = channels + 1
        for width in widths:
            self.encoders.append(nn.Sequential(cbr(prev, width), cbr(width, width)))
            prev = width
        self.pool = nn.MaxPool2d(2)
        self.center = cbr(prev, prev)
        self.assembly = SelfAssembly(*grid) if assembly == "self-assembly" else ConventionalBlock(prev)

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(prev, width, 2, stride=2))
            self.decoders.append(nn.Sequential(cbr(2 * width, width), cbr(width, width)))
            prev = width
        self.final = nn.Conv2d(prev, channels, 1)

    def _encode(self, images: torch.Tensor, pixel_mask: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        x = torch.cat([images, pixel_mask.to(images.dtype)], dim=1)
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.center(x)
        if tuple(x.shape[2:]) != tuple(self.grid):
            raise DimensionMismatchError(f"Bottleneck {tuple(x.shape[2:])} is not at the patch grid {self.grid}")
        return x, skips

    def encode(self, images: torch.Tensor, pixel_mask: torch.Tensor) -> torch.Tensor:
        """Bottleneck features (the self-assembly resolution)"""
        return self._encode(images, pixel_mask)[0]

    def forward(self, composite: torch.Tensor, pixel_mask: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
        x, skips = self._encode(composite, pixel_mask)
        x = self.assembly(x, flags)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([up(x), skip], dim=1))
        out = torch.sigmoid(self.final(x)).clamp(0.0, 1.0)
        return torch.where(pixel_mask, out, composite)


class HybridReconstructor(nn.Module):
    """Coarse transformer stage followed by the refinement U-Net"""

    def __init__(
        self,
        image_size: int = 96,
        patch_size: int = 16,
        channels: int = 3,
        dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        mlp_dim: int = 128,
        unet_channels: Sequence[int] = (16, 32, 64, 64),
        assembly: str = "self-assembly",
    ):
        super().__init__()
        if 2 ** len(unet_channels) != patch_size:
            raise DimensionMismatchError(
                f"{len(unet_channels)} U-Net levels cannot reach the patch grid for patch size {patch_size}"
            )
        self.config = {
            "image_size": image_size,
            "patch_size": patch_size,
            "channels": channels,
            "dim": dim,
            "depth": depth,
            "heads": heads,
            "mlp_dim": mlp_dim,
            "unet_channels": list(unet_channels),
            "assembly": assembly,
        }
        self.patch_size = patch_size
        self.grid = (image_size // patch_size, image_size // patch_size)
        self.coarse = CoarseReconstructor(image_size, patch_size, channels, dim, depth, heads, mlp_dim)
        self.refine_net = RefinementUNet(self.grid, channels, unet_channels, assembly)

    @property
    def embedder(self) -> PatchEmbedder:
        return self.coarse.embedder

    def pixel_mask(self, flags: torch.Tensor) -> torch.Tensor:
        return mask_to_pixels(flags.bool(), self.grid[0], self.grid[1], self.patch_size)

    def forward(
        self, images: torch.Tensor, flags: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Args:
            images: (B, C, H, W) input; content under the mask is ignored
            flags: (B, N) bool patch mask

        Returns:
            (coarse, refined, latents)
        """
        flags = flags.bool()
        pixel_mask = self.pixel_mask(flags)
        coarse, latents = self.coarse(images, flags)
        composite = torch.where(pixel_mask, coarse, images)
        refined = self.refine_net(composite, pixel_mask, flags)
        return coarse, refined, latents

    @classmethod
    def from_config(cls, config, assembly: Optional[str] = None) -> "HybridReconstructor":
        """Build from an ExperimentConfig; assembly overrides recon.assembly"""
        return cls(
            image_size=config.get("data.image_size"),
            patch_size=config.get("model.patch_size"),
            channels=config.get("data.channels"),
            dim=config.get("model.latent_dim"),
            depth=config.get("model.depth"),
            heads=config.get("model.heads"),
            mlp_dim=config.get("model.mlp_dim"),
            unet_channels=config.get("model.unet_channels"),
            assembly=assembly or config.get("recon.assembly"),
        )

    @classmethod
    def load(cls, path: str) -> "HybridReconstructor":
        tensors, meta = load_checkpoint(path, kind="reconstructor")
        model = cls(**meta["model"])
        model.load_state_dict(unprefixed(tensors, "model"))
        model.eval()
        return model


@dataclass
class ReconstructionResult:
    coarse: np.ndarray
    refined: np.ndarray
    latents: LatentSet
    mask: OcclusionMask
    losses: Dict[str, float] = field(default_factory=dict)


def _check_fit(model: HybridReconstructor, grid: PatchGrid, mask: OcclusionMask):
    if grid.patch_size != model.patch_size or grid.shape != model.grid:
        raise DimensionMismatchError(f"Grid {grid.shape} of patch size {grid.patch_size} does not fit the model")
    if (mask.rows, mask.cols) != grid.shape:
        raise DimensionMismatchError(f"Mask {mask.rows}x{mask.cols} does not match grid {grid.shape}")


@torch.no_grad()
def coarse_reconstruct(model: HybridReconstructor, grid: PatchGrid, mask: OcclusionMask) -> Tuple[np.ndarray, LatentSet]:
    """Masked-token prediction of every patch plus the reconstruction-pass latents"""
    _check_fit(model, grid, mask)
    image = reassemble(grid)
    flags = torch.from_numpy(mask.flags).unsqueeze(0)
    with eval_mode(model):
        coarse, latents = model.coarse(to_tensor(image), flags)
    latent_set = LatentSet(latents[0], grid.grid_rows, grid.grid_cols, LatentSource.RECONSTRUCTION_PASS)
    return to_image(coarse, image.dtype), latent_set


@torch.no_grad()
def refine(model: HybridReconstructor, coarse: np.ndarray, grid: PatchGrid, mask: OcclusionMask) -> np.ndarray:
    """Refinement pass; pixels outside the mask are copied from the input unchanged"""
    _check_fit(model, grid, mask)
    image = reassemble(grid)
    flags = torch.from_numpy(mask.flags).unsqueeze(0)
    pixel_mask = model.pixel_mask(flags)
    composite = torch.where(pixel_mask, to_tensor(coarse), to_tensor(image))
    with eval_mode(model):
        refined = to_image(model.refine_net(composite, pixel_mask, flags), image.dtype)
    return np.where(pixel_mask[0, 0].numpy()[..., None], refined, image)


@torch.no_grad()
def reconstruct(
    model: HybridReconstructor,
    image: np.ndarray,
    mask: OcclusionMask,
    ground_truth: Optional[np.ndarray] = None,
    fer: Optional[nn.Module] = None,
    masked_weight: float = 6.0,
) -> ReconstructionResult:
    """
    coarse_reconstruct then refine for one image

    With a ground truth the loss breakdown (re, c and, given a frozen
    expression network, sc) is attached to the result.
    """
    grid = partition(image, model.patch_size)
    coarse, latents = coarse_reconstruct(model, grid, mask)
    refined = refine(model, coarse, grid, mask)

    losses: Dict[str, float] = {}
    if ground_truth is not None:
        validate_image(ground_truth, model.patch_size)
        gt = to_tensor(ground_truth)
        rec = to_tensor(refined)
        pixel_mask = model.pixel_mask(torch.from_numpy(mask.flags).unsqueeze(0))
        losses["re"] = float(reconstruction_loss(gt, rec, pixel_mask, masked_weight))
        with eval_mode(model):
            losses["c"] = float(
                consistency_loss(model.refine_net.encode(rec, pixel_mask), model.refine_net.encode(gt, pixel_mask))
            )
        if fer is not None:
            with eval_mode(fer):
                losses["sc"] = float(semantic_consistency_loss(gt, rec, fer))
    return ReconstructionResult(coarse, refined, latents, mask, losses)


def sample_patch_masks(
    batch: int, num_patches: int, min_proportion: float, max_proportion: float, rng: np.random.Generator
) -> torch.Tensor:
    """(batch, N) random masks, each with a proportion drawn from U[min, max]"""
    flags = np.zeros((batch, num_patches), dtype=bool)
    for row in flags:
        count = occluded_count(rng.uniform(min_proportion, max_proportion), num_patches)
        count = min(count, num_patches - 1)
        row[rng.choice(num_patches, size=count, replace=False)] = True
    return torch.from_numpy(flags)


class ReconstructorTrainer:
    """
    Joint generator / discriminator training with exact resume

    Each epoch reseeds torch and numpy from seed + epoch, so a run resumed
    from a checkpoint replays the same batches and masks.
    """

    def __init__(
        self,
        model: HybridReconstructor,
        fer: Optional[nn.Module] = None,
        weights: LossWeights = LossWeights(),
        lr: float = 2e-4,
        disc_lr: float = 2e-4,
        batch_size: int = 16,
        masked_weight: float = 6.0,
        min_proportion: float = 0.1,
        max_proportion: float = 0.5,
        seed: int = 0,
    ):
        self.model = model
        self.fer = fer
        self.weights = weights
        self.batch_size = batch_size
        self.masked_weight = masked_weight
        self.min_proportion = min_proportion
        self.max_proportion = max_proportion
        self.seed = seed
        self.epoch = 0
        self.history: List[Dict[str, float]] = []

        channels = model.config["channels"]
        self.disc = PatchDiscriminator(channels)
        self.feature_disc = None
        if fer is not None:
            for param in fer.parameters():
                param.requires_grad_(False)
            fer.eval()
            self.feature_disc = FeaturePatchDiscriminator(fer.feature_channels)

        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.5, 0.999))
        disc_params = list(self.disc.parameters())
        if self.feature_disc is not None:
            disc_params += list(self.feature_disc.parameters())
        self.disc_optimizer = torch.optim.Adam(disc_params, lr=disc_lr, betas=(0.5, 0.999))

    def _features(self, images: torch.Tensor) -> torch.Tensor:
        return self.fer.features(images)

    def _batch_parts(self, gt: torch.Tensor, flags: torch.Tensor) -> Tuple[LossParts, torch.Tensor, torch.Tensor]:
        """(loss parts on the refined output, coarse-stage reconstruction loss, refined batch)"""
        model = self.model
        pixel_mask = model.pixel_mask(flags)
        occluded = torch.where(pixel_mask, torch.full_like(gt, FILL_VALUE), gt)
        coarse, refined, _ = model(occluded, flags)

        re = reconstruction_loss(gt, refined, pixel_mask, self.masked_weight)
        coarse_re = reconstruction_loss(gt, coarse, pixel_mask, self.masked_weight)
        with torch.no_grad():
            gt_features = model.refine_net.encode(gt, pixel_mask)
        c = consistency_loss(model.refine_net.encode(refined, pixel_mask), gt_features)

        zero = torch.zeros((), dtype=gt.dtype)
        if self.fer is not None:
            sc = semantic_consistency_loss(gt, refined, self.fer)
            d, df = discriminator_losses(gt, refined, self.disc, self.feature_disc, self._features)
        else:
            sc, df = zero, zero
            d = lsgan_generator_loss(self.disc(refined))
        return LossParts(re=re, c=c, sc=sc, d=d, df=df), coarse_re, refined

    def _disc_step(self, gt: torch.Tensor, refined: torch.Tensor) -> float:
        self.disc_optimizer.zero_grad()
        if self.feature_disc is not None:
            loss = discriminator_update_losses(gt, refined, self.disc, self.feature_disc, self._features)
        else:
            loss = lsgan_discriminator_loss(self.disc(gt), self.disc(refined.detach()))
        loss.backward()
        self.disc_optimizer.step()
        return loss.item()

    def train_epoch(self, images: np.ndarray) -> Dict[str, float]:
        """One pass over (n, H, W, C) images; returns the mean loss breakdown"""
        epoch = self.epoch
        torch.manual_seed(self.seed + epoch)
        rng = np.random.default_rng(self.seed + epoch)
        num_patches = self.model.grid[0] * self.model.grid[1]

        self.model.train()
        sums: Dict[str, float] = {}
        batches = 0
        progress = tqdm(
            epoch_batches(len(images), self.batch_size, self.seed, epoch),
            total=math.ceil(len(images) / self.batch_size),
            desc=f"recon {epoch + 1}",
            leave=False,
        )
        for index in progress:
            gt = torch.from_numpy(np.ascontiguousarray(images[index], dtype=np.float32)).permute(0, 3, 1, 2)
            flags = sample_patch_masks(len(index), num_patches, self.min_proportion, self.max_proportion, rng)

            parts, coarse_re, refined = self._batch_parts(gt, flags)
            # the coarse stage is supervised with the same weight as the refined output
            loss = total_loss(parts, self.weights) + self.weights.lambda_re * coarse_re
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            disc_loss = self._disc_step(gt, refined)

            logged = {**parts.as_floats(), "coarse": coarse_re.item(), "total": loss.item(), "disc": disc_loss}
            for name, value in logged.items():
                sums[name] = sums.get(name, 0.0) + value
            batches += 1

        means = {name: value / batches for name, value in sums.items()}
        self.history.append(means)
        self.epoch += 1
        logger.info(
            "recon epoch %d total %.5f re %.5f coarse %.5f c %.5f sc %.5f d %.5f df %.5f disc %.5f",
            self.epoch, means["total"], means["re"], means["coarse"], means["c"],
            means["sc"], means["d"], means["df"], means["disc"],
        )
        return means

    def fit(self, images: np.ndarray, epochs: int, checkpoint_path: Optional[str] = None) -> List[Dict[str, float]]:
        if len(images) == 0:
            raise ValueError("Cannot train the reconstructor on an empty dataset")
        while self.epoch < epochs:
            self.train_epoch(images)
            if checkpoint_path:
                self.save(checkpoint_path)
        return self.history

    def save(self, path: str):
        tensors = prefixed(self.model.state_dict(), "model")
        tensors.update(prefixed(self.disc.state_dict(), "disc"))
        if self.feature_disc is not None:
            tensors.update(prefixed(self.feature_disc.state_dict(), "feature_disc"))
        opt_tensors, opt_groups = pack_optimizer(self.optimizer, "opt")
        disc_tensors, disc_groups = pack_optimizer(self.disc_optimizer, "disc_opt")
        tensors.update(opt_tensors)
        tensors.update(disc_tensors)
        meta = {
            "model": self.model.config,
            "epoch": self.epoch,
            "seed": self.seed,
            "history": self.history,
            "weights": {
                "lambda_re": self.weights.lambda_re,
                "lambda_c": self.weights.lambda_c,
                "lambda_sc": self.weights.lambda_sc,
                "lambda_d": self.weights.lambda_d,
            },
            "opt_groups": opt_groups,
            "disc_opt_groups": disc_groups,
        }
        save_checkpoint(path, tensors, kind="reconstructor", meta=meta)

    def resume(self, path: str):
        """Restore model, discriminators, optimizers, epoch and history"""
        tensors, meta = load_checkpoint(path, kind="reconstructor")
        if meta["model"] != self.model.config:
            raise DimensionMismatchError("Checkpoint was trained with a different model configuration")
        self.model.load_state_dict(unprefixed(tensors, "model"))
        self.disc.load_state_dict(unprefixed(tensors, "disc"))
        if self.feature_disc is not None:
            self.feature_disc.load_state_dict(unprefixed(tensors, "feature_disc"))
        unpack_optimizer(self.optimizer, tensors, meta["opt_groups"], "opt")
        unpack_optimizer(self.disc_optimizer, tensors, meta["disc_opt_groups"], "disc_opt")
        self.epoch = int(meta["epoch"])
        self.history = [dict(h) for h in meta["history"]]
        logger.info("Resumed reconstructor from %s at epoch %d", path, self.epoch)


def train_reconstructor(
    images: np.ndarray,
    model: HybridReconstructor,
    fer: Optional[nn.Module] = None,
    weights: LossWeights = LossWeights(),
    epochs: int = 20,
    checkpoint_path: Optional[str] = None,
    resume: bool = False,
    **trainer_kwargs: Any,
) -> Tuple[HybridReconstructor, List[Dict[str, float]]]:
    """
    Train the hybrid reconstructor on clean (n, H, W, C) images

    Masks are sampled per image each epoch; with checkpoint_path set a
    checkpoint is written after every epoch.

    Returns:
        (model, per-epoch loss history)
    """
    if len(images) == 0:
        raise ValueError("Cannot train the reconstructor on an empty dataset")
    trainer = ReconstructorTrainer(model, fer, weights, **trainer_kwargs)
    if resume and checkpoint_path:
        trainer.resume(checkpoint_path)
    history = trainer.fit(images, epochs, checkpoint_path)
    model.eval()
    return model, history


def evaluate_reconstruction(
    model: HybridReconstructor,
    images: np.ndarray,
    masks: Sequence[OcclusionMask],
    fer: Optional[nn.Module] = None,
    masked_weight: float = 6.0,
    progress: Optional[Callable[[int], None]] = None,
) -> Dict[str, Any]:
    """
    Reconstruction report over clean images and their masks

    Reports refined and coarse-stage quality (full image and masked
    region), mean losses and the mean mask proportion.
    """
    if len(images) != len(masks):
        raise DimensionMismatchError(f"{len(images)} images but {len(masks)} masks")
    refined_q, coarse_q, refined_masked, coarse_masked = [], [], [], []
    loss_sums: Dict[str, float] = {}
    for i, (image, mask) in enumerate(zip(images, masks)):
        occluded = image.copy()
        pixel_flags = np.kron(mask.flags.reshape(mask.rows, mask.cols), np.ones((model.patch_size,) * 2)).astype(bool)
        occluded[pixel_flags] = FILL_VALUE
        result = reconstruct(model, occluded, mask, ground_truth=image, fer=fer, masked_weight=masked_weight)
        composite = np.where(pixel_flags[..., None], result.coarse, image)

        refined_q.append(image_quality(image, result.refined))
        coarse_q.append(image_quality(image, composite))
        refined_masked.append(psnr(image, result.refined, pixel_flags))
        coarse_masked.append(psnr(image, composite, pixel_flags))
        for name, value in result.losses.items():
            loss_sums[name] = loss_sums.get(name, 0.0) + value
        if progress is not None:
            progress(i)

    n = len(images)
    return {
        "psnr": mean_psnr(q.psnr for q in refined_q),
        "ssim": float(np.mean([q.ssim for q in refined_q])),
        "masked_psnr": mean_psnr(refined_masked),
        "coarse": {
            "psnr": mean_psnr(q.psnr for q in coarse_q),
            "ssim": float(np.mean([q.ssim for q in coarse_q])),
            "masked_psnr": mean_psnr(coarse_masked),
        },
        "losses": {name: value / n for name, value in sorted(loss_sums.items())},
        "mask_proportion": float(np.mean([m.proportion for m in masks])),
        "n_images": n,
        "assembly": model.config["assembly"],
    }
