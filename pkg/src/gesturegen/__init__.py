"""Audio-driven gesture video generation, desk scale.

Two-stage pipeline: a weakly supervised reconstruction model (latent pose
encoding, coarse-grid flow, warped features, deviation-gated decoding)
plus a conditional diffusion model over motion-feature sequences, with a
property-tested evaluation suite (Fréchet distances, diversity, beat
alignment, PSNR/SSIM).
"""

__version__ = "0.1.0"

from .config import ExperimentConfig
from .synthetic import ClipRecord, RegionAnnotation, SceneSpec, generate_clip, read_clip, write_clip

__all__ = [
    "ExperimentConfig",
    "ClipRecord",
    "RegionAnnotation",
    "SceneSpec",
    "generate_clip",
    "read_clip",
    "write_clip",
    "__version__",
]
