"""Evaluation suite: Fréchet distances, diversity, beat alignment, PSNR, SSIM.

Fréchet scores are encoder-relative: embeddings come from whatever encoder
the caller plugs in (the trained pose encoder for gesture embeddings, or
the seed-pinned random encoders below when no trained model is wanted).
Absolute values are therefore only comparable across runs sharing an
encoder; the suite asserts metric properties and directional comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage, signal
from torch import nn

from .errors import ContractError

_EIG_CLIP_TOL = 1e-8


@dataclass(frozen=True)
class EmbeddingSet:
    """A batch of embedding vectors from one encoder."""

    vectors: np.ndarray  # (N, D)
    source: str = ""

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ContractError(f"embeddings must be (N, D), got {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ContractError("embeddings contain non-finite values")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues in [-tol, 0) are rounding noise and clip to zero; anything
    more negative means the input was not a covariance matrix.
    """
    vals, vecs = np.linalg.eigh(mat)
    if (vals < -_EIG_CLIP_TOL).any():
        raise ContractError(
            f"matrix has eigenvalue {vals.min():.3e} below -{_EIG_CLIP_TOL:g}; "
            "not positive semidefinite")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(real: EmbeddingSet, fake: EmbeddingSet) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    ``|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})``, with the cross
    term evaluated as ``tr((A S_f A)^{1/2})`` for ``A = S_r^{1/2}`` so only
    symmetric matrices are square-rooted.
    """
    if real.dim != fake.dim:
        raise ContractError(f"embedding dims disagree: {real.dim} vs {fake.dim}")
    for name, s in (("real", real), ("fake", fake)):
        if s.vectors.shape[0] < 2:
            raise ContractError(f"{name} set needs at least 2 vectors for statistics")
    mu_r = real.vectors.mean(axis=0)
    mu_f = fake.vectors.mean(axis=0)
    sigma_r = np.atleast_2d(np.cov(real.vectors, rowvar=False))
    sigma_f = np.atleast_2d(np.cov(fake.vectors, rowvar=False))
    a = _psd_sqrt(sigma_r)
    inner = a @ sigma_f @ a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if (vals < -_EIG_CLIP_TOL).any():
        raise ContractError("cross-covariance product is not positive semidefinite")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(sigma_r) + np.trace(sigma_f) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def diversity(sets: list[EmbeddingSet]) -> float:
    """Mean pairwise distance between the per-input mean embeddings."""
    if len(sets) < 2:
        raise ContractError("diversity needs at least two embedding sets")
    means = [s.vectors.mean(axis=0) for s in sets]
    dists = []
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            dists.append(float(np.linalg.norm(means[i] - means[j])))
    return float(np.mean(dists))


def _check_beats(name: str, times) -> np.ndarray:
    arr = np.asarray(times, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{name} beat sequence must be nonempty")
    if (np.diff(arr) <= 0).any():
        raise ContractError(f"{name} beat times must be strictly increasing")
    return arr


def beat_alignment(speech_beats, gesture_beats, sigma: float = 0.1) -> float:
    """Mean Gaussian proximity of each speech beat to its nearest gesture beat.

    1.0 when every speech beat coincides with a gesture beat; decays with
    the squared gap at scale ``sigma`` (seconds).
    """
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    speech = _check_beats("speech", speech_beats)
    gesture = _check_beats("gesture", gesture_beats)
    gaps = np.min((speech[:, None] - gesture[None, :]) ** 2, axis=1)
    return float(np.mean(np.exp(-gaps / (2.0 * sigma * sigma))))


def _crop(img: np.ndarray, region) -> np.ndarray:
    if region is None:
        return img
    x0, y0, x1, y1 = region
    h, w = img.shape[:2]
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ContractError(f"region {region} outside {w}x{h} image or empty")
    return img[y0:y1, x0:x1]


def psnr(real: np.ndarray, fake: np.ndarray, region=None, cap_db: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {real.shape} vs {fake.shape}")
    r = _crop(real, region)
    f = _crop(fake, region)
    mse = float(np.mean((r - f) ** 2))
    if mse < 1e-10:
        return cap_db
    return min(cap_db, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(real: np.ndarray, fake: np.ndarray, region=None, window_size: int = 7,
         window_sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Structural similarity with a Gaussian window, averaged over channels.

    Uses the standard stabilizers ``C1 = (0.01 R)^2`` and ``C2 = (0.03 R)^2``
    for data range ``R``. Identical images score exactly 1.
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ContractError(f"shape mismatch: {real.shape} vs {fake.shape}")
    r = _crop(real, region)
    f = _crop(fake, region)
    if r.shape[0] < window_size or r.shape[1] < window_size:
        raise ContractError(f"region {r.shape[:2]} smaller than the {window_size}px window")
    if r.ndim == 2:
        r = r[..., None]
        f = f[..., None]
    window = _gaussian_window(window_size, window_sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    scores = []
    for ch in range(r.shape[2]):
        x, y = r[..., ch], f[..., ch]
        mu_x = ndimage.correlate(x, window, mode="reflect")
        mu_y = ndimage.correlate(y, window, mode="reflect")
        xx = ndimage.correlate(x * x, window, mode="reflect") - mu_x * mu_x
        yy = ndimage.correlate(y * y, window, mode="reflect") - mu_y * mu_y
        xy = ndimage.correlate(x * y, window, mode="reflect") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def gesture_beats_from_motion(seq: np.ndarray, fps: float,
                              prominence: float = 0.25) -> np.ndarray:
    """Beat times from the motion-magnitude envelope of a sequence.

    ``seq`` is anything frame-major: motion features (M, K) or rendered
    video (M, H, W, 3). The envelope is the L2 norm of first differences;
    beats are its local maxima with prominence at least ``prominence``
    times the envelope range. A constant sequence has no beats.
    """
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 3:
        raise ContractError("need at least 3 frames to extract beats")
    flat = arr.reshape(arr.shape[0], -1)
    env = np.linalg.norm(np.diff(flat, axis=0), axis=1)
    spread = env.max() - env.min()
    if env.max() <= 0 or spread <= 0:
        return np.asarray([], dtype=np.float64)
    peaks, _ = signal.find_peaks(env, prominence=prominence * spread)
    return (peaks + 1) / float(fps)


def _randomize(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    for p in module.parameters():
        with torch.no_grad():
            if p.ndim > 1:
                fan_in = p.shape[1:].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            else:
                p.zero_()


class RandomFrameEmbedder(nn.Module):
    """Seed-pinned random conv encoder for encoder-relative Fréchet scores."""

    def __init__(self, seed: int = 11, dim: int = 32, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.head = nn.Linear(width * 2, dim)
        _randomize(self, seed)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def embed_frames(self, frames: np.ndarray) -> np.ndarray:
        """uint8 (M, H, W, 3) frames -> (M, D) float64 embeddings."""
        x = torch.from_numpy(np.ascontiguousarray(frames)).float() / 255.0
        x = x.permute(0, 3, 1, 2)
        h = torch.tanh(self.conv1(x))
        h = torch.tanh(self.conv2(h))
        out = self.head(h.mean(dim=(2, 3)))
        return out.double().numpy()


class RandomVideoEmbedder(nn.Module):
    """Clip-level embedding: temporal mean and deviation of frame features."""

    def __init__(self, seed: int = 11, dim: int = 32, width: int = 16):
        super().__init__()
        self.frame = RandomFrameEmbedder(seed, dim, width)

    @torch.no_grad()
    def embed_clip(self, frames: np.ndarray) -> np.ndarray:
        per_frame = self.frame.embed_frames(frames)
        return np.concatenate([per_frame.mean(axis=0), per_frame.std(axis=0)])
