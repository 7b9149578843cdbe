"""
Latent-OFER

Occlusion-robust facial expression recognition: patch-level occlusion detection
with a one-class SVDD on transformer latents, hybrid reconstruction with a
symmetry-aware self-assembly layer, and expression recognition that fuses CNN
features with attention-selected latent vectors.
"""

from .config import ExperimentConfig, get_config
from .pipeline import LatentOfer

__version__ = "0.1.0"
__all__ = ["LatentOfer", "ExperimentConfig", "get_config"]
