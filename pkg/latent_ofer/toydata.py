"""
Procedural face dataset

Faces are rendered from |x| only (pixel-centred coordinates), so every
image is exactly left-right symmetric. Mouth curvature, brow tilt/lift and
eye size encode one of the seven expressions.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config import epoch_batches
from .errors import DataError
from .ferhead import EXPRESSIONS, NUM_EXPRESSIONS
from .patchgrid import load_image, save_image

logger = logging.getLogger(__name__)

BASE_SIZE = 96
MANIFEST_HEADER = ["filename", "label"]
OCCLUDER_KINDS = ("hand", "cup", "bar", "blob", "checker")

MOUTH_Y = 70.0
MOUTH_HALF_WIDTH = 14.0
EYE_Y = 40.0
EYE_X = 14.0
BROW_Y = 30.0


@dataclass(frozen=True)
class ExpressionStyle:
    mouth_sag: float
    brow_tilt: float
    brow_lift: float
    eye_radius: float


# mouth sags are 3 px apart so the curvature alone identifies the class
STYLES: Dict[str, ExpressionStyle] = {
    "neutral": ExpressionStyle(0.0, 0.0, 0.0, 5.0),
    "happy": ExpressionStyle(9.0, 0.0, 0.0, 4.5),
    "sad": ExpressionStyle(-9.0, -4.0, 0.0, 4.5),
    "surprise": ExpressionStyle(3.0, 0.0, -5.0, 6.5),
    "fear": ExpressionStyle(-3.0, -3.0, -3.0, 6.0),
    "disgust": ExpressionStyle(-6.0, 2.0, 1.0, 4.0),
    "anger": ExpressionStyle(6.0, 5.0, 2.0, 4.5),
}


def _soft_band(distance: np.ndarray, half_width: float) -> np.ndarray:
    """1 inside the band, linear 1-px falloff at its edge"""
    return np.clip(half_width + 0.5 - np.abs(distance), 0.0, 1.0)


def _paint(canvas: np.ndarray, coverage: np.ndarray, color: np.ndarray):
    canvas *= 1.0 - coverage[..., None]
    canvas += coverage[..., None] * color


def render_face(label: int, rng: np.random.Generator, size: int = BASE_SIZE) -> np.ndarray:
    """
    Render one face

    Args:
        label: expression index 0..6
        rng: jitter source (colours, small geometry offsets, noise)
        size: square output size; geometry scales with size / 96

    Returns:
        size x size x 3 float array in [0, 1]
    """
    if not 0 <= label < NUM_EXPRESSIONS:
        raise ValueError(f"label must be in 0..{NUM_EXPRESSIONS - 1}, got {label}")
    if size % 2 != 0:
        raise ValueError(f"size must be even, got {size}")
    style = STYLES[EXPRESSIONS[label]]
    s = size / BASE_SIZE

    coords = np.arange(size, dtype=np.float64) + 0.5
    y = coords[:, None] / s
    ax = np.abs(coords[None, :] - size / 2.0) / s

    background = rng.uniform(0.1, 0.4, size=3)
    skin = rng.uniform(0.6, 0.85) * np.array([1.0, 0.82, 0.7]) + rng.uniform(-0.03, 0.03, size=3)
    feature = rng.uniform(0.05, 0.2, size=3)
    eye_dx = EYE_X + rng.uniform(-1.0, 1.0)
    mouth_y = MOUTH_Y + rng.uniform(-1.5, 1.5)

    canvas = np.broadcast_to(background, (size, size, 3)).copy()

    head = ((ax / 34.0) ** 2 + ((y - 50.0) / 42.0) ** 2) <= 1.0
    _paint(canvas, head.astype(np.float64), skin)

    eye_dist = np.sqrt((ax - eye_dx) ** 2 + (y - EYE_Y) ** 2)
    _paint(canvas, np.clip(style.eye_radius + 0.5 - eye_dist, 0.0, 1.0), np.ones(3) * 0.95)
    _paint(canvas, np.clip(style.eye_radius * 0.45 + 0.5 - eye_dist, 0.0, 1.0), feature)

    brow_x = (ax >= 7.0) & (ax <= 21.0)
    brow_center = BROW_Y + style.brow_lift + style.brow_tilt * (21.0 - ax) / 14.0
    _paint(canvas, _soft_band(y - brow_center, 1.0) * brow_x, feature)

    mouth_x = np.clip(1.0 - (ax - MOUTH_HALF_WIDTH), 0.0, 1.0)
    mouth_center = mouth_y - style.mouth_sag * (ax / MOUTH_HALF_WIDTH) ** 2
    _paint(canvas, _soft_band(y - mouth_center, 1.0) * mouth_x, feature)

    half = rng.normal(0.0, 0.01, size=(size, size // 2, 3))
    canvas += np.concatenate([half, half[:, ::-1]], axis=1)
    return np.clip(canvas, 0.0, 1.0)


def _band_centroid(column: np.ndarray, lo: int, hi: int) -> float:
    """Darkness-weighted centroid row of a column within [lo, hi)"""
    luma = column[lo:hi].mean(axis=-1)
    # the offset keeps pixel noise out of the weights
    darkness = np.clip(np.median(luma) - luma - 0.1, 0.0, None)
    rows = np.arange(lo, hi) + 0.5
    return float((darkness * rows).sum() / max(darkness.sum(), 1e-12))


def decode_mouth_curvature(image: np.ndarray) -> int:
    """
    Rule-based label decoder for 96 x 96 renders

    Measures the mouth sag as the centre-column mouth row minus the
    corner-column row and returns the class with the nearest sag.
    """
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[1]
    if image.shape[0] != BASE_SIZE or size != BASE_SIZE:
        raise ValueError(f"decode_mouth_curvature expects {BASE_SIZE}x{BASE_SIZE} images")
    lo, hi = int(MOUTH_Y - 14), int(MOUTH_Y + 14)
    center_col = size // 2 - 1
    corner_col = size // 2 + int(MOUTH_HALF_WIDTH) - 1
    corner_x = corner_col + 0.5 - size / 2.0

    sag = _band_centroid(image[:, corner_col], lo, hi) - _band_centroid(image[:, center_col], lo, hi)
    scale = 1.0 - (0.5 / MOUTH_HALF_WIDTH) ** 2 / (corner_x / MOUTH_HALF_WIDTH) ** 2
    expected = np.array([STYLES[name].mouth_sag for name in EXPRESSIONS]) * (corner_x / MOUTH_HALF_WIDTH) ** 2
    # sag is measured relative to the centre column at |x| = 0.5
    expected = expected * scale
    return int(np.argmin(np.abs(-sag - expected)))


def generate_toy_dataset(n: int, seed: int, out_dir: str, image_size: int = BASE_SIZE) -> str:
    """
    Write n faces (label = i mod 7) plus labels.csv

    Returns:
        Path of the manifest
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        manifest = os.path.join(out_dir, "labels.csv")
        with open(manifest, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for i in range(n):
                label = i % NUM_EXPRESSIONS
                filename = f"face_{i:05d}.png"
                image = render_face(label, np.random.default_rng([seed, i]), image_size)
                save_image(image, os.path.join(out_dir, filename))
                writer.writerow([filename, label])
    except OSError as e:
        raise DataError(f"Cannot write dataset to {out_dir}: {e}", code="unwritable-directory")
    logger.info("Wrote %d faces to %s", n, out_dir)
    return manifest


def make_occluder(kind: str, size: int, seed: int = 0) -> np.ndarray:
    """
    Procedural RGBA occluder sprite (size x size x 4, values in [0, 1])

    Kinds: hand, cup, bar, blob, checker. Sprites are only used for
    evaluation; the detector never sees them during training.
    """
    if kind not in OCCLUDER_KINDS:
        raise ValueError(f"Unknown occluder kind '{kind}', expected one of {OCCLUDER_KINDS}")
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    c = np.arange(size, dtype=np.float64) + 0.5
    y, x = c[:, None] / size, c[None, :] / size
    color = rng.uniform(0.0, 1.0, size=3)

    if kind == "hand":
        color = np.array([0.85, 0.62, 0.48]) + rng.uniform(-0.05, 0.05, size=3)
        palm = ((x - 0.5) / 0.38) ** 2 + ((y - 0.68) / 0.3) ** 2 <= 1.0
        fingers = np.zeros_like(palm)
        for k in range(4):
            cx = 0.2 + 0.2 * k
            fingers |= (np.abs(x - cx) < 0.07) & (y > 0.08 + 0.05 * abs(k - 1.5)) & (y < 0.6)
        alpha = (palm | fingers).astype(np.float64)
    elif kind == "cup":
        body = (np.abs(x - 0.42) < 0.3) & (y > 0.2) & (y < 0.95)
        ring = np.abs(np.hypot(x - 0.75, y - 0.55) - 0.15) < 0.05
        alpha = (body | ring).astype(np.float64)
        stripe = (np.abs(y - 0.45) < 0.05) & body
        color = np.where(stripe[..., None], 1.0 - color, color)
    elif kind == "bar":
        alpha = (np.abs(y - 0.5) < 1.0 / 6.0).astype(np.float64) * np.ones_like(x)
    elif kind == "blob":
        field = np.zeros((size, size))
        for _ in range(5):
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            field += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * rng.uniform(0.05, 0.12) ** 2))
        alpha = (field > 0.6).astype(np.float64)
    else:
        cells = max(size // 8, 1)
        checks = ((np.arange(size)[:, None] // cells) + (np.arange(size)[None, :] // cells)) % 2
        color = np.where(checks[..., None] == 1, color, 1.0 - color)
        alpha = np.ones((size, size))

    rgb = np.broadcast_to(color, (size, size, 3)) if np.ndim(color) == 1 else color
    return np.concatenate([rgb, alpha[..., None]], axis=-1).clip(0.0, 1.0)


def random_placement(
    image_shape: Tuple[int, ...], occluder_size: int, rng: np.random.Generator
) -> Tuple[int, int]:
    """Uniform top-left corner that keeps the occluder inside the image"""
    height, width = image_shape[:2]
    if occluder_size > min(height, width):
        raise ValueError(f"Occluder of size {occluder_size} does not fit a {height}x{width} image")
    return int(rng.integers(0, height - occluder_size + 1)), int(rng.integers(0, width - occluder_size + 1))


@dataclass
class FaceDataset:
    """Validated images in filename order"""

    images: np.ndarray
    labels: np.ndarray
    filenames: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int]) -> "FaceDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return FaceDataset(self.images[indices], self.labels[indices], [self.filenames[i] for i in indices])

    def batches(self, batch_size: int, seed: int, epoch: int = 0) -> Iterator[np.ndarray]:
        """Index batches of one epoch; order depends only on (seed, epoch)"""
        return epoch_batches(len(self), batch_size, seed, epoch)

    def split(self, val_fraction: float, seed: int) -> Tuple["FaceDataset", "FaceDataset"]:
        """Seeded (train, validation) split; both keep filename order"""
        if not 0.0 <= val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
        n_val = int(round(val_fraction * len(self)))
        chosen = np.zeros(len(self), dtype=bool)
        chosen[np.random.default_rng(seed).permutation(len(self))[:n_val]] = True
        return self.subset(np.flatnonzero(~chosen)), self.subset(np.flatnonzero(chosen))


def ingest(manifest_path: str, image_size: Optional[int] = None) -> FaceDataset:
    """
    Load and validate a labels.csv manifest

    Raises:
        DataError: code missing-file, bad-header, bad-label or
            unreadable-image; row is the 1-based manifest line
    """
    if not os.path.exists(manifest_path):
        raise DataError(f"Manifest not found: {manifest_path}", code="missing-file")
    root = os.path.dirname(manifest_path)

    with open(manifest_path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or [cell.strip() for cell in rows[0]] != MANIFEST_HEADER:
        raise DataError(f"Manifest header must be '{','.join(MANIFEST_HEADER)}'", code="bad-header", row=1)

    entries = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"Row {line}: expected 2 columns, got {len(row)}", code="bad-label", row=line)
        filename, raw_label = row[0].strip(), row[1].strip()
        try:
            label = int(raw_label)
        except ValueError:
            label = -1
        if not 0 <= label < NUM_EXPRESSIONS:
            raise DataError(f"Row {line}: label '{raw_label}' not in 0..{NUM_EXPRESSIONS - 1}", code="bad-label", row=line)
        path = os.path.join(root, filename)
        if not os.path.exists(path):
            raise DataError(f"Row {line}: image not found: {filename}", code="missing-file", row=line)
        entries.append((filename, label, line))

    if not entries:
        raise DataError(f"Manifest {manifest_path} lists no images", code="missing-file")
    entries.sort(key=lambda e: e[0])

    images = []
    for filename, _, line in entries:
        try:
            image = load_image(os.path.join(root, filename))
        except DataError as e:
            raise DataError(f"Row {line}: {e}", code=e.code, row=line)
        if image_size is not None and image.shape[:2] != (image_size, image_size):
            raise DataError(
                f"Row {line}: {filename} is {image.shape[0]}x{image.shape[1]}, expected {image_size}x{image_size}",
                code="unreadable-image",
                row=line,
            )
        if images and image.shape != images[0].shape:
            raise DataError(f"Row {line}: {filename} has shape {image.shape}", code="unreadable-image", row=line)
        images.append(image)

    return FaceDataset(
        np.stack(images).astype(np.float32),
        np.array([e[1] for e in entries], dtype=np.int64),
        [e[0] for e in entries],
    )
