"""Feature warping and deviation-gated decoding.

The reconstruction path: the driving image is encoded to a motion feature,
expanded to a dense flow field, and used to backward-warp the enhanced
source features. A bounded elementwise gate computed from the warped
features then blends the source feature map with its refined version, and
a shared upsampling head renders the blend to pixels. The gate is what
lets the decoder repair occlusions and misalignments left by the warp,
for foreground and background alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError
from .motion_latent import FlowDecoder, PoseEncoder, PoseTransform, TransformParams

# Margin used internally to keep float32 gate outputs strictly inside
# (0, cap) when the logistic saturates; mathematically a no-op.
_GATE_MARGIN = 1e-6


def activate(x: torch.Tensor, c_lambda: float = 0.2) -> torch.Tensor:
    """Piecewise-linear activation: ``x`` for x >= 0, ``c_lambda * x`` below.

    ``c_lambda`` controls how much negative inputs contribute: 0 gives a
    hard rectifier, 1 the identity. Continuous at 0 for any setting.
    """
    if c_lambda < 0:
        raise ContractError("c_lambda must be >= 0")
    return F.leaky_relu(x, negative_slope=c_lambda)


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp of ``features`` along ``flow``.

    Output position ``p`` samples the input at ``p + flow[p]`` (flow in
    pixel units, x displacement first). Samples falling outside the grid
    clamp to the border. Differentiable in both arguments.
    """
    if features.ndim != 4:
        raise ContractError(f"features must be (B, C, H, W), got {tuple(features.shape)}")
    b, _, h, w = features.shape
    if flow.shape != (b, h, w, 2):
        raise ContractError(
            f"flow shape {tuple(flow.shape)} does not match features {tuple(features.shape)}")
    if h < 2 or w < 2:
        raise ContractError("warp needs a grid of at least 2x2")
    dtype, device = features.dtype, features.device
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                            torch.arange(w, dtype=dtype, device=device), indexing="ij")
    px = xs.unsqueeze(0) + flow[..., 0]
    py = ys.unsqueeze(0) + flow[..., 1]
    grid = torch.stack((2.0 * px / (w - 1) - 1.0, 2.0 * py / (h - 1) - 1.0), dim=-1)
    return F.grid_sample(features, grid, mode="bilinear", padding_mode="border",
                         align_corners=True)


def full_scene_deviation(x: torch.Tensor, weight, bias, cap: float = 1.0) -> torch.Tensor:
    """Bounded elementwise gate ``cap * logistic(weight * x + bias)``.

    Strictly inside (0, cap) in exact arithmetic; monotone increasing in
    ``x`` wherever ``weight`` > 0.
    """
    if cap <= 0:
        raise ContractError("cap must be positive")
    return cap * torch.sigmoid(weight * x + bias)


class DeviationGate(nn.Module):
    """Learnable per-channel gate over warped features.

    Weight and bias are scalars per channel, broadcast over space; ``cap``
    bounds the output range.
    """

    def __init__(self, channels: int, cap: float = 1.0):
        super().__init__()
        self.cap = cap
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, warped: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(warped).all():
            raise ContractError("gate input contains non-finite values")
        w = self.weight.view(1, -1, 1, 1)
        b = self.bias.view(1, -1, 1, 1)
        return full_scene_deviation(warped, w, b, self.cap)


def deviation_blend(features: torch.Tensor, refined: torch.Tensor, delta: torch.Tensor,
                    cap: float = 1.0, validate: bool = True) -> torch.Tensor:
    """Interpolated decode input: ``delta * features + (1 - delta) * refined``.

    With ``cap`` = 1 this is a convex combination per element. ``delta``
    must lie strictly inside (0, cap); callers holding float32 gate outputs
    that saturated to a bound should clamp first (the generator does).
    """
    if features.shape != refined.shape or features.shape != delta.shape:
        raise ContractError("features, refined, and delta must share a shape")
    if validate:
        if bool((delta <= 0).any()) or bool((delta >= cap).any()):
            raise ContractError(f"delta values must lie strictly inside (0, {cap})")
    return delta * features + (1.0 - delta) * refined


class SourceEncoder(nn.Module):
    """Downsampling encoder producing base and enhanced source feature maps.

    The enhanced map adds a learned residual on top of the base features;
    training shapes it into a cleaner, motion-friendly representation.
    """

    def __init__(self, image_size: int = 64, feature_size: int = 16, channels: int = 64,
                 c_lambda: float = 0.2):
        super().__init__()
        factor = image_size // feature_size
        if feature_size * factor != image_size or factor not in (2, 4, 8):
            raise ConfigError(
                f"image_size {image_size} must be feature_size {feature_size} times 2, 4 or 8")
        self.image_size = image_size
        self.c_lambda = c_lambda
        n_down = factor.bit_length() - 1
        chans = [3] + [max(16, channels >> (n_down - 1 - i)) for i in range(n_down - 1)] + [channels]
        down = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            down.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            down.append(nn.GroupNorm(4, cout))
        self.down = nn.ModuleList(down)
        self.enhance_conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.enhance_norm = nn.GroupNorm(4, channels)
        self.enhance_conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if image.shape[-2:] != (self.image_size, self.image_size):
            raise ConfigError(
                f"image is {tuple(image.shape[-2:])}, encoder configured for "
                f"{self.image_size}x{self.image_size}")
        h = image
        for i in range(0, len(self.down), 2):
            h = F.leaky_relu(self.down[i + 1](self.down[i](h)), self.c_lambda)
        base = h
        e = activate(self.enhance_norm(self.enhance_conv1(base)), self.c_lambda)
        enhanced = base + self.enhance_conv2(e)
        return base, enhanced


class FeatureRefiner(nn.Module):
    """Two residual conv blocks at feature resolution (the in-place decoder)."""

    def __init__(self, channels: int = 64, c_lambda: float = 0.2):
        super().__init__()
        self.c_lambda = c_lambda
        self.blocks = nn.ModuleList()
        for _ in range(2):
            self.blocks.append(nn.ModuleList([
                nn.Conv2d(channels, channels, 3, padding=1),
                nn.GroupNorm(4, channels),
                nn.Conv2d(channels, channels, 3, padding=1),
            ]))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        h = features
        for conv1, norm, conv2 in self.blocks:
            r = activate(norm(conv1(h)), self.c_lambda)
            h = h + conv2(r)
        return h


class RenderHead(nn.Module):
    """Upsample a feature blend to an RGB image in [0, 1].

    Sub-pixel (pixel-shuffle) upsampling: each stage predicts 4x channels
    and rearranges them into a doubled grid, which reconstructs sharp
    edges far better than nearest-plus-conv at this scale.
    """

    def __init__(self, image_size: int = 64, feature_size: int = 16, channels: int = 64,
                 c_lambda: float = 0.2):
        super().__init__()
        factor = image_size // feature_size
        self.c_lambda = c_lambda
        n_up = factor.bit_length() - 1
        self.stages = nn.ModuleList()
        cin = channels
        for _ in range(n_up):
            cout = max(32, cin // 2)
            self.stages.append(nn.ModuleList([
                nn.Conv2d(cin, cout * 4, 3, padding=1),
                nn.GroupNorm(4, cout * 4),
                nn.Conv2d(cout, cout, 3, padding=1)]))
            cin = cout
        self.to_rgb = nn.Conv2d(cin, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = z
        for expand, norm, smooth in self.stages:
            h = F.pixel_shuffle(activate(norm(expand(h)), self.c_lambda), 2)
            h = activate(smooth(h), self.c_lambda)
        return torch.sigmoid(self.to_rgb(h))


@dataclass
class ReconIntermediates:
    motion_feature: torch.Tensor
    params: TransformParams
    flow: torch.Tensor
    warped: torch.Tensor
    delta: torch.Tensor | None
    blend: torch.Tensor


class DeviationGenerator(nn.Module):
    """Full source-to-driving reconstruction model.

    ``use_deviation=False`` ablates the gate: the warped enhanced features
    are rendered directly, with no blend against the refined source map.
    """

    def __init__(self, image_size: int = 64, latent_dim: int = 32, feature_size: int = 16,
                 channels: int = 64, transform_grid: int = 4, pose_hidden: int = 64,
                 encoder_width: int = 16, c_lambda: float = 0.2, deviation_cap: float = 1.0,
                 max_shift: float = 6.0, use_deviation: bool = True):
        super().__init__()
        self.use_deviation = use_deviation
        self.deviation_cap = deviation_cap
        self.pose_encoder = PoseEncoder(latent_dim, image_size, encoder_width, c_lambda)
        self.pose_transform = PoseTransform(latent_dim, transform_grid, pose_hidden,
                                            c_lambda, max_shift)
        self.flow_decoder = FlowDecoder(feature_size, feature_size)
        self.source_encoder = SourceEncoder(image_size, feature_size, channels, c_lambda)
        self.gate = DeviationGate(channels, deviation_cap)
        self.refiner = FeatureRefiner(channels, c_lambda)
        self.head = RenderHead(image_size, feature_size, channels, c_lambda)

    def encode_pose(self, image: torch.Tensor) -> torch.Tensor:
        return self.pose_encoder(image)

    def motion_flow(self, mf: torch.Tensor) -> torch.Tensor:
        return self.flow_decoder(self.pose_transform(mf))

    def decode(self, features: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
        """Render the gated blend of ``features`` and their refinement."""
        z = deviation_blend(features, self.refiner(features), delta, self.deviation_cap)
        return self.head(z)

    def forward(self, source: torch.Tensor, driving: torch.Tensor,
                return_intermediates: bool = False):
        mf = self.pose_encoder(driving)
        params = self.pose_transform(mf)
        flow = self.flow_decoder(params)
        base, enhanced = self.source_encoder(source)
        warped = warp(enhanced, flow)
        if self.use_deviation:
            margin = _GATE_MARGIN * self.deviation_cap
            delta = self.gate(warped).clamp(margin, self.deviation_cap - margin)
            blend = deviation_blend(base, self.refiner(base), delta,
                                    self.deviation_cap, validate=False)
        else:
            delta = None
            blend = warped
        image = self.head(blend)
        if return_intermediates:
            return image, ReconIntermediates(mf, params, flow, warped, delta, blend)
        return image

    def reconstruct(self, source: torch.Tensor, driving: torch.Tensor) -> torch.Tensor:
        return self.forward(source, driving)
