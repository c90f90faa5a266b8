"""Experiment configuration: flat key=value files, validation, hashing.

Config files are plain text, one ``key = value`` pair per line, ``#``
comments allowed. ``schema_version`` is required. CLI flags override file
keys. Validation collects every violated constraint instead of stopping
at the first, so a bad config is reported in full before any data or
training step is touched.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONFIG_SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    # data / geometry
    image_size: int = 64
    latent_dim: int = 32
    feature_size: int = 16
    feature_channels: int = 64
    transform_grid: int = 4
    chunk_frames: int = 16
    audio_dim: int = 8
    # model knobs
    c_lambda: float = 0.2
    deviation_cap: float = 1.0
    max_shift: float = 6.0
    pose_hidden: int = 64
    encoder_width: int = 16
    denoiser_width: int = 128
    use_deviation_gate: bool = True
    # diffusion schedule
    diffusion_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    # loss weights
    lambda_per: float = 10.0
    lambda_gan: float = 1.0
    lambda_discr: float = 1.0
    lambda_velocity: float = 1.0
    lambda_acceleration: float = 1.0
    # perceptual extractor
    pyramid_levels: tuple[int, ...] = (64, 32)
    local_crop: int = 24
    extractor_seed: int = 7
    video_embed_seed: int = 11
    # metrics
    bas_sigma: float = 0.1
    beat_prominence: float = 0.25
    # optimization
    lr_stage1: float = 2e-3
    lr_discriminator: float = 2e-3
    lr_stage2: float = 2e-3
    batch_size: int = 8
    steps_stage1: int = 500
    steps_stage2: int = 800
    teacher_forcing_max: float = 0.5
    stage2_finetune_lpe: bool = False
    checkpoint_every: int = 100
    log_every: int = 10
    # run plumbing
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/exp"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "tuple[int, ...]":
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"config key '{name}': {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    seen_version = False
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "schema_version":
            seen_version = True
            if raw.strip() != str(CONFIG_SCHEMA_VERSION):
                raise ConfigError(f"{source}: unsupported schema_version {raw.strip()}")
            continue
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{ln}: unknown config key '{key}'")
        values[key] = _parse_value(key, raw)
    if not seen_version:
        raise ConfigError(f"{source}: missing schema_version")
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` override strings on top of a config."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not key=value")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(cfg, **updates)


def validate(cfg: ExperimentConfig) -> list[str]:
    """Return every violated constraint; an empty list means valid."""
    bad: list[str] = []

    def positive_int(name):
        if not isinstance(getattr(cfg, name), int) or getattr(cfg, name) < 1:
            bad.append(f"{name} must be a positive integer, got {getattr(cfg, name)!r}")

    for name in ("image_size", "latent_dim", "feature_size", "feature_channels",
                 "transform_grid", "chunk_frames", "audio_dim", "pose_hidden",
                 "encoder_width", "denoiser_width", "diffusion_steps", "batch_size",
                 "steps_stage1", "steps_stage2", "checkpoint_every", "log_every",
                 "local_crop"):
        positive_int(name)

    if isinstance(cfg.image_size, int) and isinstance(cfg.feature_size, int) \
            and cfg.image_size >= 1 and cfg.feature_size >= 1:
        factor, rem = divmod(cfg.image_size, cfg.feature_size)
        if rem != 0 or factor not in (2, 4, 8):
            bad.append(f"image_size {cfg.image_size} must be feature_size "
                       f"{cfg.feature_size} times 2, 4 or 8")
        if cfg.image_size % 8 != 0:
            bad.append(f"image_size {cfg.image_size} must be divisible by 8 "
                       "(pose encoder downsampling)")
        for level in cfg.pyramid_levels:
            if level < 4 or level > cfg.image_size or cfg.image_size % level != 0:
                bad.append(f"pyramid level {level} must divide image_size {cfg.image_size} "
                           "and be at least 4")
    if not cfg.pyramid_levels:
        bad.append("pyramid_levels must not be empty")
    if isinstance(cfg.transform_grid, int) and isinstance(cfg.feature_size, int):
        if cfg.transform_grid < 2:
            bad.append(f"transform_grid must be at least 2, got {cfg.transform_grid}")
        elif cfg.transform_grid > cfg.feature_size:
            bad.append(f"transform_grid {cfg.transform_grid} exceeds feature_size "
                       f"{cfg.feature_size}")
    if isinstance(cfg.chunk_frames, int) and cfg.chunk_frames < 4:
        bad.append(f"chunk_frames must be at least 4 (previous-frame window), "
                   f"got {cfg.chunk_frames}")
    if isinstance(cfg.feature_size, int) and cfg.feature_size < 2:
        bad.append("feature_size must be at least 2")
    if isinstance(cfg.audio_dim, int) and 0 < cfg.audio_dim < 2:
        bad.append("audio_dim must be at least 2")
    if isinstance(cfg.diffusion_steps, int) and cfg.diffusion_steps == 1:
        bad.append("diffusion_steps must be at least 2")
    if not 0 < cfg.beta_start <= cfg.beta_end < 1:
        bad.append(f"betas must satisfy 0 < beta_start <= beta_end < 1, got "
                   f"({cfg.beta_start}, {cfg.beta_end})")
    if cfg.c_lambda < 0 or cfg.c_lambda != cfg.c_lambda:
        bad.append(f"c_lambda must be finite and >= 0, got {cfg.c_lambda}")
    if cfg.deviation_cap <= 0:
        bad.append(f"deviation_cap must be positive, got {cfg.deviation_cap}")
    if cfg.max_shift <= 0:
        bad.append(f"max_shift must be positive, got {cfg.max_shift}")
    lambdas = (cfg.lambda_per, cfg.lambda_gan, cfg.lambda_discr)
    if any(v < 0 for v in lambdas):
        bad.append("loss weights must be nonnegative")
    if not any(v > 0 for v in lambdas):
        bad.append("at least one of lambda_per/lambda_gan/lambda_discr must be positive")
    if cfg.lambda_velocity < 0 or cfg.lambda_acceleration < 0:
        bad.append("velocity/acceleration weights must be nonnegative")
    if cfg.bas_sigma <= 0:
        bad.append(f"bas_sigma must be positive, got {cfg.bas_sigma}")
    if not 0 <= cfg.beat_prominence <= 1:
        bad.append(f"beat_prominence must lie in [0, 1], got {cfg.beat_prominence}")
    if not 0 <= cfg.teacher_forcing_max <= 1:
        bad.append(f"teacher_forcing_max must lie in [0, 1], got {cfg.teacher_forcing_max}")
    for name in ("lr_stage1", "lr_discriminator", "lr_stage2"):
        if getattr(cfg, name) <= 0:
            bad.append(f"{name} must be positive, got {getattr(cfg, name)}")
    return bad


def require_valid(cfg: ExperimentConfig) -> None:
    problems = validate(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


def canonical_text(cfg: ExperimentConfig) -> str:
    """Canonical key=value rendering: sorted keys, stable value formatting."""
    lines = [f"schema_version={CONFIG_SCHEMA_VERSION}"]
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = format(value, ".17g")
        else:
            text = str(value)
        lines.append(f"{name}={text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable hash of the config contents, independent of key order."""
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(canonical_text(cfg))


def write_manifest(out_dir: str | Path, command: str, cfg: ExperimentConfig,
                   artifacts: dict[str, str]) -> Path:
    """Write the run manifest atomically at run start.

    The manifest is the only artifact carrying a timestamp; all other
    outputs are bit-reproducible given the config and seeds.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"command={command}",
        f"config_hash={config_hash(cfg)}",
        f"seed={cfg.seed}",
        f"started_at={time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}",
        "provenance=gesturegen-0.1.0",
    ]
    for key, value in sorted(artifacts.items()):
        lines.append(f"{key}={value}")
    path = out_dir / "manifest.txt"
    tmp = out_dir / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path
