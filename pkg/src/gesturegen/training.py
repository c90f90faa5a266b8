"""Training loops for both stages.

Stage 1 alternates generator and discriminator updates on (source,
driving) frame pairs sampled from the same clip. Stage 2 freezes the pose
encoder (unless configured otherwise), encodes every clip to motion
features, and trains the conditional denoiser on normalized feature
windows with scheduled teacher forcing of the previous-frame condition.

Batches are drawn from a counter-keyed RNG (seed, stage, step), so runs
are bit-reproducible and resuming from a checkpoint continues the exact
data order of an uninterrupted run.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig, config_hash, require_valid, write_manifest
from .deviation import DeviationGenerator
from .diffusion import Condition, DiffusionSchedule, MotionDenoiser, diffusion_loss, q_sample
from .errors import DataError
from .losses import (LossWeights, PatchDiscriminator, PerceptualExtractor,
                     discriminator_losses, perceptual_global, perceptual_local, stage1_total)
from .synthetic import ClipRecord, frames_to_tensor, read_clip


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    """Deterministic per-step RNG, independent of how the run was resumed."""
    return np.random.default_rng(np.random.SeedSequence((seed, stage, step)))


class ClipDataset:
    """All clips of a dataset directory held in memory."""

    def __init__(self, clips: list[ClipRecord], names: list[str] | None = None):
        if not clips:
            raise DataError("dataset contains no clips")
        self.clips = clips
        self.names = names or [f"clip{i:04d}" for i in range(len(clips))]
        self.tensors = [frames_to_tensor(c.frames) for c in clips]

    @classmethod
    def from_dir(cls, data_dir: str | Path) -> "ClipDataset":
        data_dir = Path(data_dir)
        if not data_dir.is_dir():
            raise DataError(f"dataset directory not found: {data_dir}")
        names = sorted(p.name for p in data_dir.iterdir()
                       if p.is_dir() and (p / "manifest.txt").exists())
        if not names:
            raise DataError(f"no clip directories under {data_dir}")
        return cls([read_clip(data_dir / name) for name in names], names)

    def require_regions(self) -> None:
        missing = [name for name, clip in zip(self.names, self.clips)
                   if clip.regions is None]
        if missing:
            raise DataError("clips missing regions.csv (required for training): "
                            + ", ".join(missing))


def build_generator(cfg: ExperimentConfig) -> DeviationGenerator:
    return DeviationGenerator(
        image_size=cfg.image_size, latent_dim=cfg.latent_dim,
        feature_size=cfg.feature_size, channels=cfg.feature_channels,
        transform_grid=cfg.transform_grid, pose_hidden=cfg.pose_hidden,
        encoder_width=cfg.encoder_width, c_lambda=cfg.c_lambda,
        deviation_cap=cfg.deviation_cap, max_shift=cfg.max_shift,
        use_deviation=cfg.use_deviation_gate)


def build_denoiser(cfg: ExperimentConfig) -> MotionDenoiser:
    return MotionDenoiser(latent_dim=cfg.latent_dim, audio_dim=cfg.audio_dim,
                          frames=cfg.chunk_frames, width=cfg.denoiser_width,
                          c_lambda=cfg.c_lambda)


def build_schedule(cfg: ExperimentConfig) -> DiffusionSchedule:
    return DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)


def _sample_pairs(ds: ClipDataset, batch: int, rng: np.random.Generator):
    src, drv, regions = [], [], []
    clip_ids = rng.integers(0, len(ds.clips), size=batch)
    for ci in clip_ids:
        n = ds.clips[ci].n_frames
        i, j = int(rng.integers(0, n)), int(rng.integers(0, n))
        src.append(ds.tensors[ci][i])
        drv.append(ds.tensors[ci][j])
        regions.append(ds.clips[ci].regions[j])
    return torch.stack(src), torch.stack(drv), regions


def _save_stage1(path: Path, generator, discriminator, opt_g, opt_d, step: int,
                 cfg_hash: str) -> None:
    tensors = {}
    tensors.update(ckpt.module_tensors(generator, "generator"))
    tensors.update(ckpt.module_tensors(discriminator, "discriminator"))
    og_t, og_m = ckpt.optimizer_tensors(opt_g, "opt_g")
    od_t, od_m = ckpt.optimizer_tensors(opt_d, "opt_d")
    tensors.update(og_t)
    tensors.update(od_t)
    ckpt.save_tensors(path, tensors, {"kind": "stage1", "step": step,
                                      "config_hash": cfg_hash, "opt_g": og_m,
                                      "opt_d": od_m})


def load_stage1_generator(path: str | Path, cfg: ExperimentConfig) -> DeviationGenerator:
    tensors, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "stage1":
        raise ckpt.CheckpointError(f"{path} is not a stage-1 checkpoint")
    generator = build_generator(cfg)
    ckpt.load_module(generator, tensors, "generator")
    generator.eval()
    return generator


@dataclass
class Stage1Result:
    checkpoint: Path
    steps_run: int
    log_path: Path


def train_stage1(cfg: ExperimentConfig, data_dir: str | Path | None = None,
                 out_dir: str | Path | None = None, resume: str | Path | None = None,
                 on_step: Callable[[int, DeviationGenerator], bool] | None = None
                 ) -> Stage1Result:
    """Alternating reconstruction/adversarial optimization.

    ``on_step(step, generator)`` runs after each optimizer step when given;
    returning True stops training early (the final checkpoint is still
    written). Emits ``stage1_losses.csv`` with one row per step.
    """
    require_valid(cfg)
    data_dir = Path(data_dir if data_dir is not None else cfg.data_dir)
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = ClipDataset.from_dir(data_dir)
    ds.require_regions()

    torch.manual_seed(cfg.seed)
    generator = build_generator(cfg)
    discriminator = PatchDiscriminator(c_lambda=cfg.c_lambda)
    extractor = PerceptualExtractor(cfg.extractor_seed, c_lambda=cfg.c_lambda,
                                    pyramid=cfg.pyramid_levels)
    opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_stage1, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=cfg.lr_discriminator,
                             betas=(0.5, 0.999))
    weights = LossWeights(cfg.lambda_per, cfg.lambda_gan, cfg.lambda_discr)
    adversarial = cfg.lambda_gan > 0 or cfg.lambda_discr > 0
    cfg_hash = config_hash(cfg)

    start_step = 0
    if resume is not None:
        tensors, meta = ckpt.load_tensors(resume)
        if meta.get("kind") != "stage1":
            raise ckpt.CheckpointError(f"{resume} is not a stage-1 checkpoint")
        ckpt.load_module(generator, tensors, "generator")
        ckpt.load_module(discriminator, tensors, "discriminator")
        ckpt.restore_optimizer(opt_g, tensors, meta["opt_g"], "opt_g")
        ckpt.restore_optimizer(opt_d, tensors, meta["opt_d"], "opt_d")
        start_step = int(meta["step"])

    final_path = out_dir / "stage1.ckpt"
    log_path = out_dir / "stage1_losses.csv"
    write_manifest(out_dir, "train-stage1", cfg,
                   {"checkpoint": str(final_path), "metrics_log": str(log_path)})
    header = "step,perceptual_global,perceptual_local,gan,discr,total\n"
    log = open(log_path, "a" if start_step > 0 else "w")
    if start_step == 0:
        log.write(header)

    step = start_step
    try:
        for step in range(start_step + 1, cfg.steps_stage1 + 1):
            rng = step_rng(cfg.seed, 1, step)
            src, drv, regions = _sample_pairs(ds, cfg.batch_size, rng)
            recon = generator(src, drv)
            per_glo = perceptual_global(extractor, drv, recon)
            per_loc = perceptual_local(extractor, drv, recon, regions, cfg.local_crop)
            if adversarial:
                d_loss, g_gan = discriminator_losses(discriminator, drv, recon)
            else:
                d_loss = torch.zeros(())
                g_gan = torch.zeros(())

            opt_g.zero_grad(set_to_none=True)
            g_total = cfg.lambda_per * (per_glo + per_loc) + cfg.lambda_gan * g_gan
            g_total.backward()
            opt_g.step()

            if adversarial:
                opt_d.zero_grad(set_to_none=True)
                (cfg.lambda_discr * d_loss).backward()
                opt_d.step()

            total = stage1_total((per_glo + per_loc).item(), g_gan.item(), d_loss.item(),
                                 weights)
            log.write(f"{step},{per_glo.item():.8g},{per_loc.item():.8g},"
                      f"{g_gan.item():.8g},{d_loss.item():.8g},{total:.8g}\n")
            if step % cfg.log_every == 0:
                log.flush()
            if step % cfg.checkpoint_every == 0:
                _save_stage1(out_dir / f"stage1_step{step:06d}.ckpt", generator,
                             discriminator, opt_g, opt_d, step, cfg_hash)
            if on_step is not None and on_step(step, generator):
                break
    finally:
        log.close()
    _save_stage1(final_path, generator, discriminator, opt_g, opt_d, step, cfg_hash)
    return Stage1Result(checkpoint=final_path, steps_run=step, log_path=log_path)


def encode_clip_features(generator: DeviationGenerator, ds: ClipDataset) -> list[np.ndarray]:
    """Frozen per-frame motion features for every clip, (n_frames, K) each."""
    out = []
    with torch.no_grad():
        for frames in ds.tensors:
            out.append(generator.pose_encoder(frames).double().numpy())
    return out


def motion_stats(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate(features, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-6)
    return mean, std


def _save_stage2(path: Path, denoiser, opt, step: int, cfg_hash: str,
                 mf_mean: np.ndarray, mf_std: np.ndarray,
                 pose_encoder=None) -> None:
    tensors = ckpt.module_tensors(denoiser, "denoiser")
    o_t, o_m = ckpt.optimizer_tensors(opt, "opt")
    tensors.update(o_t)
    tensors["mf_mean"] = mf_mean.astype(np.float64)
    tensors["mf_std"] = mf_std.astype(np.float64)
    meta = {"kind": "stage2", "step": step, "config_hash": cfg_hash, "opt": o_m}
    if pose_encoder is not None:
        # Finetuned encoder rides along; inference applies it over stage 1.
        tensors.update(ckpt.module_tensors(pose_encoder, "pose_encoder"))
        meta["finetuned_encoder"] = True
    ckpt.save_tensors(path, tensors, meta)


def load_stage2(path: str | Path, cfg: ExperimentConfig
                ) -> tuple[MotionDenoiser, DiffusionSchedule, np.ndarray, np.ndarray]:
    tensors, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "stage2":
        raise ckpt.CheckpointError(f"{path} is not a stage-2 checkpoint")
    denoiser = build_denoiser(cfg)
    ckpt.load_module(denoiser, tensors, "denoiser")
    denoiser.eval()
    return denoiser, build_schedule(cfg), tensors["mf_mean"], tensors["mf_std"]


@dataclass
class Stage2Result:
    checkpoint: Path
    steps_run: int
    log_path: Path


def _window_condition(mf_norm: np.ndarray, audio: np.ndarray, start: int, frames: int,
                      latent_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target window plus its audio rows and ground-truth previous frames.

    Rows before the clip start follow the first-chunk rule and are zero.
    """
    x0 = mf_norm[start:start + frames]
    audio_rows = audio[start:start + frames]
    prev = np.zeros((4, latent_dim), dtype=np.float64)
    lo = max(0, start - 4)
    if start > 0:
        prev[4 - (start - lo):] = mf_norm[lo:start]
    return x0, audio_rows, prev


def train_stage2(cfg: ExperimentConfig, stage1_ckpt: str | Path,
                 data_dir: str | Path | None = None, out_dir: str | Path | None = None,
                 resume: str | Path | None = None) -> Stage2Result:
    """Conditional denoiser training on encoded motion windows.

    The previous-frame condition is teacher-forced from encoder features
    and replaced by the model's own clean-sequence prediction for the
    preceding window with probability ramping from 0 to
    ``teacher_forcing_max`` over the first 60% of training.
    """
    require_valid(cfg)
    stage1_ckpt = Path(stage1_ckpt)
    if not stage1_ckpt.exists():
        raise DataError(f"stage-1 checkpoint not found: {stage1_ckpt}")
    data_dir = Path(data_dir if data_dir is not None else cfg.data_dir)
    out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = ClipDataset.from_dir(data_dir)
    m = cfg.chunk_frames
    for name, clip in zip(ds.names, ds.clips):
        if clip.n_frames < m:
            raise DataError(f"clip {name} has {clip.n_frames} frames, need >= {m}")
        if clip.audio.shape[1] != cfg.audio_dim:
            raise DataError(f"clip {name} has audio_dim {clip.audio.shape[1]}, "
                            f"config says {cfg.audio_dim}")

    generator = load_stage1_generator(stage1_ckpt, cfg)
    # Pose encoder is frozen by default; with stage2_finetune_lpe the source
    # condition is encoded live and its gradient reaches the encoder, while
    # targets always come from detached encodings.
    finetune = cfg.stage2_finetune_lpe
    features = encode_clip_features(generator, ds)
    mf_mean, mf_std = motion_stats(features)
    normalized = [(f - mf_mean) / mf_std for f in features]

    torch.manual_seed(cfg.seed)
    denoiser = build_denoiser(cfg)
    schedule = build_schedule(cfg)
    params = list(denoiser.parameters())
    if finetune:
        for p in generator.pose_encoder.parameters():
            p.requires_grad_(True)
        params += list(generator.pose_encoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr_stage2)
    cfg_hash = config_hash(cfg)

    start_step = 0
    if resume is not None:
        tensors, meta = ckpt.load_tensors(resume)
        if meta.get("kind") != "stage2":
            raise ckpt.CheckpointError(f"{resume} is not a stage-2 checkpoint")
        ckpt.load_module(denoiser, tensors, "denoiser")
        ckpt.restore_optimizer(opt, tensors, meta["opt"], "opt")
        mf_mean, mf_std = tensors["mf_mean"], tensors["mf_std"]
        normalized = [(f - mf_mean) / mf_std for f in features]
        start_step = int(meta["step"])

    final_path = out_dir / "stage2.ckpt"
    log_path = out_dir / "stage2_losses.csv"
    write_manifest(out_dir, "train-stage2", cfg,
                   {"checkpoint": str(final_path), "metrics_log": str(log_path),
                    "stage1_checkpoint": str(stage1_ckpt)})
    log = open(log_path, "a" if start_step > 0 else "w")
    if start_step == 0:
        log.write("step,mf,velocity,acceleration,total\n")

    k = cfg.latent_dim
    ramp = max(1, int(0.6 * cfg.steps_stage2))
    step = start_step
    try:
        for step in range(start_step + 1, cfg.steps_stage2 + 1):
            rng = step_rng(cfg.seed, 2, step)
            replace_p = cfg.teacher_forcing_max * min(1.0, step / ramp)
            if finetune:
                with torch.no_grad():
                    normalized = [(f - mf_mean) / mf_std
                                  for f in encode_clip_features(generator, ds)]
            x0_rows, audio_rows, prev_rows, src_rows, clip_ids = [], [], [], [], []
            for _ in range(cfg.batch_size):
                ci = int(rng.integers(0, len(ds.clips)))
                start = int(rng.integers(0, ds.clips[ci].n_frames - m + 1))
                x0, audio, prev = _window_condition(normalized[ci], ds.clips[ci].audio,
                                                    start, m, k)
                if start >= m and rng.random() < replace_p:
                    prev = _predict_prev(denoiser, schedule, normalized[ci],
                                         ds.clips[ci].audio, start, m, k, rng)
                x0_rows.append(x0)
                audio_rows.append(audio)
                prev_rows.append(prev)
                src_rows.append(normalized[ci][0])
                clip_ids.append(ci)
            x0 = torch.from_numpy(np.stack(x0_rows)).float()
            if finetune:
                src_frames = torch.cat([ds.tensors[ci][0:1] for ci in clip_ids])
                src_mf = ((generator.pose_encoder(src_frames)
                           - torch.from_numpy(mf_mean).float())
                          / torch.from_numpy(mf_std).float())
            else:
                src_mf = torch.from_numpy(np.stack(src_rows)).float()
            cond = Condition(torch.from_numpy(np.stack(audio_rows)).float(),
                             torch.from_numpy(np.stack(prev_rows)).float(),
                             src_mf)
            t = torch.from_numpy(rng.integers(1, schedule.steps + 1,
                                              size=cfg.batch_size))
            noise = torch.from_numpy(rng.standard_normal(x0.shape)).float()
            total, parts = diffusion_loss(denoiser, schedule, x0, cond, t, noise,
                                          cfg.lambda_velocity, cfg.lambda_acceleration)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            log.write(f"{step},{parts['mf'].item():.8g},{parts['velocity'].item():.8g},"
                      f"{parts['acceleration'].item():.8g},{total.item():.8g}\n")
            if step % cfg.log_every == 0:
                log.flush()
            if step % cfg.checkpoint_every == 0:
                _save_stage2(out_dir / f"stage2_step{step:06d}.ckpt", denoiser, opt,
                             step, cfg_hash, mf_mean, mf_std,
                             generator.pose_encoder if finetune else None)
    finally:
        log.close()
    _save_stage2(final_path, denoiser, opt, step, cfg_hash, mf_mean, mf_std,
                 generator.pose_encoder if finetune else None)
    return Stage2Result(checkpoint=final_path, steps_run=step, log_path=log_path)


def _predict_prev(denoiser, schedule, mf_norm, audio, start, frames, latent_dim, rng):
    """Model prediction for the last 4 frames of the preceding window."""
    x0, audio_rows, prev = _window_condition(mf_norm, audio, start - frames, frames,
                                             latent_dim)
    cond = Condition(torch.from_numpy(audio_rows[None]).float(),
                     torch.from_numpy(prev[None]).float(),
                     torch.from_numpy(mf_norm[0][None]).float())
    t = int(rng.integers(1, schedule.steps + 1))
    noise = torch.from_numpy(rng.standard_normal(x0.shape)).float()
    with torch.no_grad():
        x_t = q_sample(schedule, torch.from_numpy(x0[None]).float(), t, noise[None])
        t_tensor = torch.full((1,), float(t))
        x0_hat = denoiser(x_t, t_tensor, cond)
    return x0_hat[0, -4:].double().numpy()
