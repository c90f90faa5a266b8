"""Conditional denoising diffusion over motion-feature sequences.

The denoiser predicts the clean sequence directly (x0 parameterization).
Conditioning is the per-frame audio feature rows, the motion features
predicted for the four preceding frames (all zeros for the first chunk of
a clip), and the source frame's motion feature. The training loss adds
first- and second-difference terms on top of the plain MSE so constant
and linear errors in time are penalized separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError


@dataclass(frozen=True)
class DiffusionSchedule:
    """Forward-process variances and their cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ContractError("schedule needs at least two steps")
        if not (betas > 0).all() or not (betas < 1).all():
            raise ContractError("betas must lie in (0, 1)")
        if (np.diff(betas) < 0).any():
            raise ContractError("betas must be non-decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))
        if (np.diff(self.alpha_bars) >= 0).any():
            raise ContractError("cumulative alpha must be strictly decreasing")

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float = 1e-3,
               beta_end: float = 0.2) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t) -> float | np.ndarray:
        """Cumulative alpha at step ``t`` (1-based); ``t=0`` maps to 1."""
        t_arr = np.asarray(t)
        if (t_arr < 0).any() or (t_arr > self.steps).any():
            raise ContractError(f"step {t} outside [0, {self.steps}]")
        padded = np.concatenate(([1.0], self.alpha_bars))
        out = padded[t_arr]
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def _as_coeff(value, like: torch.Tensor) -> torch.Tensor:
    coeff = torch.as_tensor(value, dtype=like.dtype, device=like.device)
    while coeff.ndim < like.ndim:
        coeff = coeff.unsqueeze(-1)
    return coeff


def q_sample(schedule: DiffusionSchedule, x0: torch.Tensor, t,
             noise: torch.Tensor) -> torch.Tensor:
    """Forward-noised sequence ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``.

    ``t`` may be a python int or a per-sample integer tensor, 1-based;
    ``t=0`` is the no-noise limit and returns ``x0`` exactly.
    """
    if x0.shape != noise.shape:
        raise ContractError("noise must match x0 shape")
    t_np = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t
    ab = schedule.alpha_bar(t_np)
    a = _as_coeff(np.sqrt(ab), x0)
    b = _as_coeff(np.sqrt(1.0 - np.asarray(ab)), x0)
    return a * x0 + b * noise


@dataclass
class Condition:
    """Conditioning bundle for one chunk of frames."""

    audio: torch.Tensor      # (B, M, A)
    prev4: torch.Tensor      # (B, 4, K); all-zero for the first chunk
    source_mf: torch.Tensor  # (B, K)

    def __post_init__(self):
        if self.audio.ndim != 3 or self.prev4.ndim != 3 or self.source_mf.ndim != 2:
            raise ContractError("condition tensors must be batched")
        b = self.audio.shape[0]
        if self.prev4.shape[0] != b or self.source_mf.shape[0] != b:
            raise ContractError("condition batch sizes disagree")
        if self.prev4.shape[1] != 4:
            raise ContractError(f"prev4 must hold 4 frames, got {self.prev4.shape[1]}")
        if self.prev4.shape[2] != self.source_mf.shape[1]:
            raise ContractError("prev4 and source_mf latent widths disagree")

    @classmethod
    def single(cls, audio: torch.Tensor, prev4: torch.Tensor,
               source_mf: torch.Tensor) -> "Condition":
        return cls(audio.unsqueeze(0), prev4.unsqueeze(0), source_mf.unsqueeze(0))


def sinusoidal_embedding(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of scalar values, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=values.dtype, device=values.device)
                      * (-math.log(10000.0) / max(half - 1, 1)))
    args = values[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class MotionDenoiser(nn.Module):
    """Temporal conv/MLP stack predicting the clean motion sequence.

    Frame tokens mix the noisy latent with the frame's audio row; a global
    conditioning vector (previous four predictions, source feature, time
    step) is broadcast onto every token before two residual temporal
    blocks.
    """

    def __init__(self, latent_dim: int = 32, audio_dim: int = 8, frames: int = 16,
                 width: int = 128, c_lambda: float = 0.2):
        super().__init__()
        self.latent_dim = latent_dim
        self.audio_dim = audio_dim
        self.frames = frames
        self.c_lambda = c_lambda
        self.frame_in = nn.Linear(latent_dim + audio_dim, width)
        self.cond_in = nn.Linear(5 * latent_dim, width)
        self.time_fc1 = nn.Linear(width, width)
        self.time_fc2 = nn.Linear(width, width)
        self.blocks = nn.ModuleList()
        for _ in range(2):
            self.blocks.append(nn.ModuleDict({
                "norm": nn.LayerNorm(width),
                "temporal": nn.Conv1d(width, width, 3, padding=1),
                "mix": nn.Linear(width, width),
            }))
        self.out_norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, latent_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Condition) -> torch.Tensor:
        b, m, k = x_t.shape
        if k != self.latent_dim or m != self.frames:
            raise ContractError(
                f"sequence is {m}x{k}, model configured for {self.frames}x{self.latent_dim}")
        if cond.audio.shape != (b, m, self.audio_dim):
            raise ContractError(
                f"audio is {tuple(cond.audio.shape)}, expected {(b, m, self.audio_dim)}")
        t = t.to(x_t.dtype)
        t_emb = sinusoidal_embedding(t, self.frame_in.out_features)
        t_emb = self.time_fc2(F.silu(self.time_fc1(t_emb)))
        g = self.cond_in(torch.cat([cond.prev4.reshape(b, -1), cond.source_mf], dim=1))
        h = self.frame_in(torch.cat([x_t, cond.audio], dim=2))
        h = h + g[:, None, :] + t_emb[:, None, :]
        for block in self.blocks:
            r = block["norm"](h)
            r = block["temporal"](r.transpose(1, 2)).transpose(1, 2)
            r = block["mix"](F.leaky_relu(r, self.c_lambda))
            h = h + r
        return self.out(self.out_norm(h))


def denoise_step(model: MotionDenoiser, schedule: DiffusionSchedule, x_t: torch.Tensor,
                 t: int, cond: Condition,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """One reverse step: predict x0, take the posterior mean, add posterior
    noise except at the final step ``t=1``."""
    if not 1 <= t <= schedule.steps:
        raise ContractError(f"step {t} outside [1, {schedule.steps}]")
    t_tensor = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype, device=x_t.device)
    x0_hat = model(x_t, t_tensor, cond)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta = float(schedule.betas[t - 1])
    alpha = 1.0 - beta
    coef_x0 = beta * math.sqrt(ab_prev) / (1.0 - ab_t)
    coef_xt = (1.0 - ab_prev) * math.sqrt(alpha) / (1.0 - ab_t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t > 1:
        var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype,
                            device=x_t.device)
        mean = mean + math.sqrt(var) * noise
    return mean


def sample_chunk(model: MotionDenoiser, schedule: DiffusionSchedule, cond: Condition,
                 seed: int) -> torch.Tensor:
    """Draw Gaussian noise and denoise it for the full schedule.

    Deterministic given ``seed``; the model is evaluated without gradients.
    """
    generator = torch.Generator().manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
    b = cond.audio.shape[0]
    shape = (b, model.frames, model.latent_dim)
    dtype = next(model.parameters()).dtype
    x = torch.randn(shape, generator=generator, dtype=dtype)
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            x = denoise_step(model, schedule, x, t, cond, generator)
    return x


def sequence_losses(x0_hat: torch.Tensor, x0: torch.Tensor) -> dict[str, torch.Tensor]:
    """MSE plus implicit velocity/acceleration terms between sequences.

    First differences null constant per-frame offsets; second differences
    additionally null errors linear in the frame index.
    """
    if x0_hat.shape != x0.shape:
        raise ContractError("prediction and target shapes disagree")
    if x0.shape[-2] < 3:
        raise ContractError("need at least 3 frames for the acceleration term")
    mf = F.mse_loss(x0_hat, x0)
    d_hat = x0_hat.diff(dim=-2)
    d_ref = x0.diff(dim=-2)
    vel = F.mse_loss(d_hat, d_ref)
    acc = F.mse_loss(d_hat.diff(dim=-2), d_ref.diff(dim=-2))
    return {"mf": mf, "velocity": vel, "acceleration": acc}


def diffusion_loss(model: MotionDenoiser, schedule: DiffusionSchedule, x0: torch.Tensor,
                   cond: Condition, t, noise: torch.Tensor, velocity_weight: float = 1.0,
                   acceleration_weight: float = 1.0):
    """Training objective at noise level ``t``; returns ``(total, parts)``."""
    x_t = q_sample(schedule, x0, t, noise)
    if isinstance(t, torch.Tensor):
        t_tensor = t.to(x0.dtype)
    else:
        t_tensor = torch.full((x0.shape[0],), float(t), dtype=x0.dtype, device=x0.device)
    x0_hat = model(x_t, t_tensor, cond)
    parts = sequence_losses(x0_hat, x0)
    total = (parts["mf"] + velocity_weight * parts["velocity"]
             + acceleration_weight * parts["acceleration"])
    return total, parts
