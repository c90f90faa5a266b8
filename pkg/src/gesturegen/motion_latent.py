"""Latent pose encoding and dense flow decoding.

Conventions used throughout the package:

* images are ``(B, 3, H, W)`` float tensors in [0, 1];
* motion features are ``(B, K)``;
* flow fields are ``(B, H_f, W_f, 2)`` displacement grids in feature-grid
  pixel units, channel 0 = column (x) displacement, channel 1 = row (y).

Motion is parameterized as a coarse grid of per-cell rotation angles and
2-vector translations, bilinearly upsampled to feature resolution. The
dense displacement at position ``p`` is ``(R(p) - I)(p - c) + T(p)`` with
``c`` the grid center, so identity parameters give an exactly-zero field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError


@dataclass
class TransformParams:
    """Coarse affine motion grid: one rotation angle + translation per cell."""

    angles: torch.Tensor        # (B, G, G) radians
    translations: torch.Tensor  # (B, G, G, 2) feature-grid px, (dx, dy)

    def __post_init__(self):
        if self.angles.ndim != 3:
            raise ContractError(f"angles must be (B, G, G), got {tuple(self.angles.shape)}")
        if self.translations.shape != (*self.angles.shape, 2):
            raise ContractError(
                f"translations must be (B, G, G, 2), got {tuple(self.translations.shape)}")
        if not torch.isfinite(self.angles).all() or not torch.isfinite(self.translations).all():
            raise ContractError("transform parameters must be finite")

    @property
    def rotations(self) -> torch.Tensor:
        """Per-cell rotation matrices, (B, G, G, 2, 2), orthonormal by construction."""
        c, s = torch.cos(self.angles), torch.sin(self.angles)
        return torch.stack((torch.stack((c, -s), -1), torch.stack((s, c), -1)), -2)

    @classmethod
    def identity(cls, batch: int, grid: int, dtype=torch.float32) -> "TransformParams":
        return cls(torch.zeros(batch, grid, grid, dtype=dtype),
                   torch.zeros(batch, grid, grid, 2, dtype=dtype))

    @classmethod
    def pure_translation(cls, batch: int, grid: int, dx: float, dy: float,
                         dtype=torch.float32) -> "TransformParams":
        t = torch.zeros(batch, grid, grid, 2, dtype=dtype)
        t[..., 0] = dx
        t[..., 1] = dy
        return cls(torch.zeros(batch, grid, grid, dtype=dtype), t)


def _norm_block(channels: int) -> nn.Module:
    return nn.GroupNorm(min(4, channels), channels)


class PoseEncoder(nn.Module):
    """Strided conv stack with a spatial readout: image -> motion feature.

    The readout keeps coarse spatial structure (1x1 channel reduction,
    then flatten + linear) rather than global pooling: pooled statistics
    are nearly position-invariant and erase exactly the information a
    pose latent must carry. Deterministic for fixed weights (no dropout,
    no batch statistics), so repeated encodings are identical.
    """

    def __init__(self, latent_dim: int = 32, image_size: int = 64, width: int = 16,
                 c_lambda: float = 0.2):
        super().__init__()
        if image_size % 8 != 0:
            raise ConfigError(f"image_size {image_size} must be divisible by 8")
        self.latent_dim = latent_dim
        self.image_size = image_size
        self.c_lambda = c_lambda
        chans = [3, width, width * 2, width * 4]
        self.blocks = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.blocks.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1), _norm_block(cout)))
        self.reduce = nn.Conv2d(chans[-1], 8, 1)
        side = image_size // 8
        self.head = nn.Linear(8 * side * side, latent_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ConfigError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
        if image.shape[-2:] != (self.image_size, self.image_size):
            raise ConfigError(
                f"image is {tuple(image.shape[-2:])}, encoder configured for "
                f"{self.image_size}x{self.image_size}")
        h = image
        for block in self.blocks:
            h = F.leaky_relu(block(h), self.c_lambda)
        h = F.leaky_relu(self.reduce(h), self.c_lambda)
        return self.head(h.flatten(1))


class PoseTransform(nn.Module):
    """Two-layer perceptron from motion feature to a coarse transform grid.

    The final layer is zero-initialized so a fresh model maps every latent
    to the exact identity transform. Angles are bounded to (-pi, pi) and
    translations to (-max_shift, max_shift) via tanh, keeping decoded flow
    inside the feature-grid sanity bound.
    """

    def __init__(self, latent_dim: int = 32, grid: int = 4, hidden: int = 64,
                 c_lambda: float = 0.2, max_shift: float = 6.0):
        super().__init__()
        self.grid = grid
        self.c_lambda = c_lambda
        self.max_shift = max_shift
        self.fc1 = nn.Linear(latent_dim, hidden)
        self.fc2 = nn.Linear(hidden, grid * grid * 3)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, mf: torch.Tensor) -> TransformParams:
        if not torch.isfinite(mf).all():
            raise ContractError("motion feature contains non-finite values")
        h = F.leaky_relu(self.fc1(mf), self.c_lambda)
        raw = self.fc2(h).view(mf.shape[0], self.grid, self.grid, 3)
        angles = math.pi * torch.tanh(raw[..., 0])
        translations = self.max_shift * torch.tanh(raw[..., 1:])
        return TransformParams(angles, translations)


def decode_flow(params: TransformParams, height: int, width: int) -> torch.Tensor:
    """Expand a coarse transform grid into a dense displacement field.

    Angle and translation channels are bilinearly upsampled to
    ``(height, width)``; each dense position then gets the displacement of
    its interpolated affine map about the grid center.
    """
    if height < 2 or width < 2:
        raise ContractError("flow grid must be at least 2x2")
    b = params.angles.shape[0]
    dtype, device = params.angles.dtype, params.angles.device
    packed = torch.cat((params.angles.unsqueeze(-1), params.translations), dim=-1)
    packed = packed.permute(0, 3, 1, 2)  # (B, 3, G, G)
    if packed.shape[-2:] != (height, width):
        packed = F.interpolate(packed, size=(height, width), mode="bilinear",
                               align_corners=True)
    theta = packed[:, 0]
    tx, ty = packed[:, 1], packed[:, 2]

    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                            torch.arange(width, dtype=dtype, device=device),
                            indexing="ij")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    rx = (xs - cx).expand(b, -1, -1)
    ry = (ys - cy).expand(b, -1, -1)
    cos_m1 = torch.cos(theta) - 1.0
    sin = torch.sin(theta)
    dx = cos_m1 * rx - sin * ry + tx
    dy = sin * rx + cos_m1 * ry + ty
    return torch.stack((dx, dy), dim=-1)


class FlowDecoder(nn.Module):
    """Parameter-free wrapper fixing the output resolution of decode_flow."""

    def __init__(self, height: int = 16, width: int = 16):
        super().__init__()
        self.height = height
        self.width = width

    def forward(self, params: TransformParams) -> torch.Tensor:
        return decode_flow(params, self.height, self.width)
