"""Reconstruction-stage objectives.

Perceptual terms compare fixed-network activations of real and generated
frames over a resolution pyramid, globally and on hand/face crops. The
adversarial pair is a patch discriminator trained with the least-squares
objective. The combined objective is
``lambda_per * (global + local) + lambda_gan * generator_term
+ lambda_discr * discriminator_term``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math

import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_tensors
from .deviation import activate
from .errors import ContractError
from .synthetic import RegionAnnotation


@dataclass(frozen=True)
class LossWeights:
    lambda_per: float = 10.0
    lambda_gan: float = 1.0
    lambda_discr: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_per, self.lambda_gan, self.lambda_discr)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ContractError("loss weights must be finite and nonnegative")
        if not any(v > 0 for v in vals):
            raise ContractError("at least one loss weight must be positive")


def _seeded_randomize(module: nn.Module, seed: int) -> None:
    # Weight tensors get fan-in scaled normals, biases zero; generator-based
    # so the result is independent of global RNG state.
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        with torch.no_grad():
            if p.ndim > 1:
                fan_in = p.shape[1:].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            else:
                p.zero_()


class PerceptualExtractor(nn.Module):
    """Fixed feature network for perceptual losses.

    Weights are generated from ``seed``, frozen, and never trained, giving
    a deterministic random-feature perceptual distance. Tap 0 is the input
    itself, so the distance is zero only for identical images. Real
    pretrained weights can be swapped in via :meth:`load_weights`.
    """

    def __init__(self, seed: int = 7, width: int = 16, c_lambda: float = 0.2,
                 pyramid: Sequence[int] = (64, 32)):
        super().__init__()
        self.c_lambda = c_lambda
        self.pyramid = tuple(pyramid)
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 2, 3, padding=1)
        _seeded_randomize(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)

    def load_weights(self, path) -> None:
        """Replace the random features with weights from a tensor container."""
        tensors, _ = load_tensors(path)
        state = {k: torch.from_numpy(v) for k, v in tensors.items()}
        self.load_state_dict(state)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = activate(self.conv1(x), self.c_lambda)
        f2 = activate(self.conv2(f1), self.c_lambda)
        f3 = activate(self.conv3(f2), self.c_lambda)
        return [x, f1, f3]


def perceptual_distance(extractor: PerceptualExtractor, real: torch.Tensor,
                        fake: torch.Tensor) -> torch.Tensor:
    """Mean absolute feature difference summed over taps, single resolution."""
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    total = real.new_zeros(())
    for fr, ff in zip(extractor.features(real), extractor.features(fake)):
        total = total + (fr - ff).abs().mean()
    return total


def perceptual_global(extractor: PerceptualExtractor, real: torch.Tensor,
                      fake: torch.Tensor, levels: Sequence[int] | None = None) -> torch.Tensor:
    """Perceptual distance accumulated over a resolution pyramid."""
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    size = real.shape[-1]
    total = real.new_zeros(())
    for level in (levels if levels is not None else extractor.pyramid):
        if level > size or size % level != 0:
            raise ContractError(f"pyramid level {level} incompatible with image size {size}")
        factor = size // level
        if factor == 1:
            r, f = real, fake
        else:
            r = F.avg_pool2d(real, factor)
            f = F.avg_pool2d(fake, factor)
        total = total + perceptual_distance(extractor, r, f)
    return total


def _crop_resize(img: torch.Tensor, box: tuple[int, int, int, int], size: int) -> torch.Tensor:
    x0, y0, x1, y1 = box
    h, w = img.shape[-2:]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ContractError(f"region box {box} outside {w}x{h} image or empty")
    crop = img[..., y0:y1, x0:x1]
    return F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)


def perceptual_local(extractor: PerceptualExtractor, real: torch.Tensor, fake: torch.Tensor,
                     regions: RegionAnnotation | Sequence[RegionAnnotation],
                     crop_size: int = 24) -> torch.Tensor:
    """Hand-region plus face-region perceptual distance on resized crops."""
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if isinstance(regions, RegionAnnotation):
        regions = [regions] * real.shape[0]
    if len(regions) != real.shape[0]:
        raise ContractError(f"{len(regions)} region annotations for batch of {real.shape[0]}")
    total = real.new_zeros(())
    for i, reg in enumerate(regions):
        for box in (reg.hand_box, reg.face_box):
            r = _crop_resize(real[i:i + 1], box, crop_size)
            f = _crop_resize(fake[i:i + 1], box, crop_size)
            total = total + perceptual_distance(extractor, r, f)
    return total / real.shape[0]


class PatchDiscriminator(nn.Module):
    """Strided conv net mapping an image to a grid of real/fake scores."""

    def __init__(self, width: int = 32, c_lambda: float = 0.2):
        super().__init__()
        self.c_lambda = c_lambda
        self.conv1 = nn.Conv2d(3, width, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(4, width * 2)
        self.score = nn.Conv2d(width * 2, 1, 3, padding=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(image), self.c_lambda)
        h = F.leaky_relu(self.norm2(self.conv2(h)), self.c_lambda)
        return self.score(h)


def lsgan_discriminator_loss(real_scores: torch.Tensor,
                             fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares GAN objective for the discriminator."""
    return ((real_scores - 1.0) ** 2 + fake_scores ** 2).mean()


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares GAN objective for the generator."""
    return ((fake_scores - 1.0) ** 2).mean()


def discriminator_losses(disc: nn.Module, real: torch.Tensor,
                         fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Patch-score losses ``(d_loss, g_loss)`` for one real/fake pair.

    The discriminator term detaches the generated image; the generator
    term does not, so its gradient reaches the generator.
    """
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    d_loss = lsgan_discriminator_loss(disc(real), disc(fake.detach()))
    g_loss = lsgan_generator_loss(disc(fake))
    return d_loss, g_loss


def stage1_total(perceptual, gan, discr, weights: LossWeights):
    """Weighted sum of the three reconstruction-stage loss parts."""
    for name, part in (("perceptual", perceptual), ("gan", gan), ("discr", discr)):
        value = part.detach().item() if isinstance(part, torch.Tensor) else float(part)
        if not math.isfinite(value):
            raise ContractError(f"{name} loss part is not finite")
    return (weights.lambda_per * perceptual + weights.lambda_gan * gan
            + weights.lambda_discr * discr)
