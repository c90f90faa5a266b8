"""Procedural speaker clips with analytically known motion.

Each clip shows an articulated figure (torso, head with mouth, two
two-segment arms) over a static textured background. The left arm swings
with a pulse envelope locked to the clip's beat times: the swing jumps to
its apex exactly on the beat frame and decays slowly afterwards, so both
the arm angle and the frame-to-frame motion magnitude peak exactly at
``round(beat_time * fps)``. That gives beat-alignment scoring a
known-perfect oracle. The mouth opens and closes on a fixed sinusoidal
envelope.

On-disk clip layout (the interchange format for all commands)::

    clip_dir/
      manifest.txt     key=value lines: schema_version, fps, n_frames,
                       height, width, audio_dim, beat_times
      frames/00000.png lossless frames, one per index
      audio.csv        one row of audio features per frame
      regions.csv      per-frame hand and face boxes (optional for
                       generated output, required for training data)

Audio is represented as precomputed per-frame features (onset envelope,
beat indicator, band energies); a raw-waveform front end would slot in as
a separate producer of the same rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ClipFormatError, ContractError

CLIP_SCHEMA_VERSION = 1

# Swing pulse sampled at frame offsets relative to the beat frame. The
# large step into offset 0 makes the motion-magnitude envelope peak on the
# beat frame itself, not mid-swing.
_PULSE_OFFSETS = (-3, -2, -1, 0, 1, 2, 3, 4)
_PULSE_VALUES = (0.02, 0.08, 0.2, 1.0, 0.7, 0.45, 0.22, 0.08)


@dataclass(frozen=True)
class RegionAnnotation:
    """Half-open pixel boxes ``(x0, y0, x1, y1)`` for hand and face."""

    hand_box: tuple[int, int, int, int]
    face_box: tuple[int, int, int, int]

    def __post_init__(self):
        for name, box in (("hand_box", self.hand_box), ("face_box", self.face_box)):
            x0, y0, x1, y1 = box
            if x0 < 0 or y0 < 0 or x1 <= x0 or y1 <= y0:
                raise ContractError(f"{name} {box} is empty or negative")

    def validate_within(self, height: int, width: int) -> None:
        for name, box in (("hand_box", self.hand_box), ("face_box", self.face_box)):
            if box[2] > width or box[3] > height:
                raise ContractError(f"{name} {box} exceeds {width}x{height} image bounds")


@dataclass(frozen=True)
class SceneSpec:
    """Figure geometry, colors, and the beat-locked motion program."""

    image_size: int = 64
    fps: int = 10
    beat_times: tuple[float, ...] | None = None  # explicit beats; else interval grid
    beat_interval_s: float = 0.5
    beat_phase_s: float = 0.5
    swing_amplitude: float = 1.1   # radians added to the left shoulder at pulse peak
    base_angle: float = 0.35
    right_arm_factor: float = 0.25
    mouth_rate_hz: float = 2.5
    figure_scale: float = 1.0
    audio_dim: int = 8
    background_cells: int = 8
    torso_color: tuple[int, int, int] = (60, 80, 170)
    head_color: tuple[int, int, int] = (214, 172, 140)
    arm_color: tuple[int, int, int] = (200, 60, 60)
    hand_color: tuple[int, int, int] = (240, 200, 70)
    mouth_color: tuple[int, int, int] = (110, 20, 40)


@dataclass
class ClipRecord:
    """Paired frames, per-frame audio features, and region boxes."""

    frames: np.ndarray                       # (M, H, W, 3) uint8
    audio: np.ndarray                        # (M, A) float64
    regions: list[RegionAnnotation] | None   # one per frame when present
    fps: int
    beat_times: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3 or self.frames.dtype != np.uint8:
            raise ContractError(f"frames must be (M, H, W, 3) uint8, got "
                                f"{self.frames.shape} {self.frames.dtype}")
        if self.audio.ndim != 2 or self.audio.shape[0] != self.frames.shape[0]:
            raise ContractError("audio rows must match frame count")
        if self.regions is not None and len(self.regions) != self.frames.shape[0]:
            raise ContractError("region annotations must match frame count")
        if list(self.beat_times) != sorted(self.beat_times):
            raise ContractError("beat_times must be sorted")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration_s(self) -> float:
        return self.n_frames / self.fps

    def frames_float(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipRecord):
            return NotImplemented
        return (np.array_equal(self.frames, other.frames)
                and np.array_equal(self.audio, other.audio)
                and self.regions == other.regions
                and self.fps == other.fps
                and self.beat_times == other.beat_times)


def frames_to_tensor(frames: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 (M, H, W, 3) -> float (M, 3, H, W) in [0, 1]."""
    arr = torch.from_numpy(np.ascontiguousarray(frames)).to(dtype) / 255.0
    return arr.permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(images: torch.Tensor) -> np.ndarray:
    """float (M, 3, H, W) in [0, 1] -> uint8 (M, H, W, 3)."""
    arr = images.detach().clamp(0.0, 1.0).permute(0, 2, 3, 1).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def beat_frames(beat_times, fps: int) -> list[int]:
    return [int(round(t * fps)) for t in beat_times]


def beat_envelope(n_frames: int, beats_f) -> np.ndarray:
    """Sum of swing pulses centered on the given beat frames."""
    env = np.zeros(n_frames, dtype=np.float64)
    for bf in beats_f:
        for off, val in zip(_PULSE_OFFSETS, _PULSE_VALUES):
            idx = bf + off
            if 0 <= idx < n_frames:
                env[idx] += val
    return env


def resolve_beats(spec: SceneSpec, duration_s: float) -> tuple[float, ...]:
    """Explicit beats if given, else the interval grid; clipped so every
    pulse apex sits strictly inside the clip."""
    if spec.beat_times is not None:
        beats = list(spec.beat_times)
    else:
        beats = []
        t = spec.beat_phase_s
        while t < duration_s:
            beats.append(round(t, 9))
            t += spec.beat_interval_s
    n = int(round(duration_s * spec.fps))
    return tuple(t for t in beats if 1 <= round(t * spec.fps) <= n - 2)


def arm_angle_curve(spec: SceneSpec, n_frames: int, beats_f) -> np.ndarray:
    """Left shoulder angle per frame; local maxima land exactly on beat frames."""
    return spec.base_angle + spec.swing_amplitude * beat_envelope(n_frames, beats_f)


def mouth_aperture_curve(spec: SceneSpec, n_frames: int) -> np.ndarray:
    t = np.arange(n_frames, dtype=np.float64) / spec.fps
    return 0.5 * (1.0 - np.cos(2.0 * math.pi * spec.mouth_rate_hz * t))


def _direction(angle: float, side: int) -> tuple[float, float]:
    # side -1 = viewer-left arm, +1 = right; angle 0 hangs straight down
    return (side * math.sin(angle), math.cos(angle))


def _render_frame(spec: SceneSpec, background: np.ndarray, angle_left: float,
                  angle_right: float, aperture: float) -> tuple[np.ndarray, RegionAnnotation]:
    s = spec.image_size
    scale = s / 64.0 * spec.figure_scale
    img = Image.fromarray(background)
    draw = ImageDraw.Draw(img)

    def pt(x, y):
        return (x * scale, y * scale)

    cx = 32.0
    draw.rectangle([pt(cx - 9, 34), pt(cx + 9, 58)], fill=spec.torso_color)
    draw.ellipse([pt(cx - 7.5, 11.5), pt(cx + 7.5, 26.5)], fill=spec.head_color)
    mouth_h = 1.0 + 3.0 * aperture
    draw.rectangle([pt(cx - 3, 23 - mouth_h / 2), pt(cx + 3, 23 + mouth_h / 2)],
                   fill=spec.mouth_color)

    line_w = max(2, int(round(3 * scale)))
    left_wrist = (0.0, 0.0)
    for side, angle in ((-1, angle_left), (1, angle_right)):
        sx, sy = cx + side * 9, 36.0
        dx, dy = _direction(angle, side)
        ex, ey = sx + 11 * dx, sy + 11 * dy
        dx2, dy2 = _direction(1.5 * angle, side)
        wx, wy = ex + 10 * dx2, ey + 10 * dy2
        draw.line([pt(sx, sy), pt(ex, ey)], fill=spec.arm_color, width=line_w)
        draw.line([pt(ex, ey), pt(wx, wy)], fill=spec.arm_color, width=line_w)
        draw.ellipse([pt(wx - 2.5, wy - 2.5), pt(wx + 2.5, wy + 2.5)], fill=spec.hand_color)
        if side == -1:
            left_wrist = (wx, wy)

    wx, wy = left_wrist
    half = 5.0
    hand_box = (int(np.clip(round((wx - half) * scale), 0, s - 1)),
                int(np.clip(round((wy - half) * scale), 0, s - 1)),
                int(np.clip(round((wx + half) * scale), 1, s)),
                int(np.clip(round((wy + half) * scale), 1, s)))
    face_box = (int(np.clip(round((cx - 8) * scale), 0, s - 1)),
                int(np.clip(round(11 * scale), 0, s - 1)),
                int(np.clip(round((cx + 8) * scale), 1, s)),
                int(np.clip(round(28 * scale), 1, s)))
    region = RegionAnnotation(hand_box=hand_box, face_box=face_box)
    region.validate_within(s, s)
    return np.asarray(img, dtype=np.uint8), region


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    cells = rng.integers(35, 90, size=(spec.background_cells, spec.background_cells, 3))
    factor = spec.image_size // spec.background_cells
    if factor * spec.background_cells != spec.image_size:
        raise ContractError(
            f"background_cells {spec.background_cells} must divide image_size {spec.image_size}")
    return np.kron(cells, np.ones((factor, factor, 1))).astype(np.uint8)


def generate_clip(spec: SceneSpec, duration_s: float, seed: int) -> ClipRecord:
    """Render a clip; deterministic given ``(spec, seed)``."""
    if duration_s < 1.0:
        raise ContractError("clip duration must be at least 1 second")
    if spec.figure_scale <= 0:
        raise ContractError("figure_scale must be positive (zero-area figure)")
    if spec.audio_dim < 2:
        raise ContractError("audio_dim must be at least 2 (envelope + beat indicator)")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * spec.fps))
    beats = resolve_beats(spec, duration_s)
    beats_f = beat_frames(beats, spec.fps)
    env = beat_envelope(n, beats_f)
    angles_l = spec.base_angle + spec.swing_amplitude * env
    angles_r = 0.8 * spec.base_angle + spec.right_arm_factor * spec.swing_amplitude * env
    aperture = mouth_aperture_curve(spec, n)

    background = _background(spec, rng)
    frames = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.uint8)
    regions = []
    for i in range(n):
        frames[i], region = _render_frame(spec, background, angles_l[i], angles_r[i],
                                          aperture[i])
        regions.append(region)

    audio = np.zeros((n, spec.audio_dim), dtype=np.float64)
    peak = env.max() if env.max() > 0 else 1.0
    audio[:, 0] = env / peak
    if beats_f:
        audio[np.asarray(beats_f, dtype=int), 1] = 1.0
    t = np.arange(n, dtype=np.float64) / spec.fps
    for j in range(2, spec.audio_dim):
        freq = rng.uniform(0.4, 2.5)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        audio[:, j] = 0.5 + 0.35 * np.sin(2.0 * math.pi * freq * t + phase)

    return ClipRecord(frames=frames, audio=audio, regions=regions, fps=spec.fps,
                      beat_times=beats)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_clip(clip: ClipRecord, path: str | Path) -> None:
    """Write a clip directory; ``read_clip`` restores it bit-exactly."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    n, h, w, _ = clip.frames.shape
    manifest = [
        f"schema_version={CLIP_SCHEMA_VERSION}",
        f"fps={clip.fps}",
        f"n_frames={n}",
        f"height={h}",
        f"width={w}",
        f"audio_dim={clip.audio.shape[1]}",
        "beat_times=" + ",".join(_fmt(t) for t in clip.beat_times),
    ]
    (path / "manifest.txt").write_text("\n".join(manifest) + "\n")
    for i in range(n):
        Image.fromarray(clip.frames[i]).save(path / "frames" / f"{i:05d}.png")
    with open(path / "audio.csv", "w") as fh:
        for row in clip.audio:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    if clip.regions is not None:
        with open(path / "regions.csv", "w") as fh:
            for reg in clip.regions:
                fh.write(",".join(str(v) for v in (*reg.hand_box, *reg.face_box)) + "\n")


_KNOWN_ENTRIES = {"manifest.txt", "frames", "audio.csv", "regions.csv"}


def _parse_manifest(path: Path) -> dict[str, str]:
    if not path.exists():
        raise ClipFormatError(f"{path.parent}: manifest.txt not found")
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ClipFormatError(f"{path}: line {ln} is not key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_clip(path: str | Path) -> ClipRecord:
    """Load a clip directory written by :func:`write_clip`.

    Unknown files are ignored with a warning; a missing ``regions.csv``
    yields ``regions=None`` (generated output has no annotations).
    """
    path = Path(path)
    if not path.is_dir():
        raise ClipFormatError(f"{path}: not a clip directory")
    for entry in sorted(p.name for p in path.iterdir()):
        if entry not in _KNOWN_ENTRIES:
            warnings.warn(f"{path}: ignoring unexpected entry '{entry}'")

    manifest = _parse_manifest(path / "manifest.txt")
    try:
        version = int(manifest["schema_version"])
        fps = int(manifest["fps"])
        n = int(manifest["n_frames"])
        h = int(manifest["height"])
        w = int(manifest["width"])
        audio_dim = int(manifest["audio_dim"])
        beats = tuple(float(v) for v in manifest["beat_times"].split(",") if v)
    except (KeyError, ValueError) as exc:
        raise ClipFormatError(f"{path}/manifest.txt: {exc}") from exc
    if version != CLIP_SCHEMA_VERSION:
        raise ClipFormatError(f"{path}: unsupported clip schema version {version}")

    frames = np.empty((n, h, w, 3), dtype=np.uint8)
    for i in range(n):
        frame_path = path / "frames" / f"{i:05d}.png"
        if not frame_path.exists():
            raise ClipFormatError(f"{frame_path} not found")
        arr = np.asarray(Image.open(frame_path).convert("RGB"), dtype=np.uint8)
        if arr.shape != (h, w, 3):
            raise ClipFormatError(f"{frame_path}: frame is {arr.shape}, expected {(h, w, 3)}")
        frames[i] = arr

    audio_path = path / "audio.csv"
    if not audio_path.exists():
        raise ClipFormatError(f"{path}: audio.csv not found")
    rows = []
    for ln, line in enumerate(audio_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as exc:
            raise ClipFormatError(f"{audio_path}: line {ln}: {exc}") from exc
    audio = np.asarray(rows, dtype=np.float64)
    if audio.shape != (n, audio_dim):
        raise ClipFormatError(
            f"{audio_path}: got {audio.shape}, manifest says {(n, audio_dim)}")

    regions_path = path / "regions.csv"
    regions = None
    if regions_path.exists():
        regions = []
        for ln, line in enumerate(regions_path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                vals = [int(v) for v in line.split(",")]
                if len(vals) != 8:
                    raise ValueError(f"expected 8 integers, got {len(vals)}")
            except ValueError as exc:
                raise ClipFormatError(f"{regions_path}: line {ln}: {exc}") from exc
            regions.append(RegionAnnotation(hand_box=tuple(vals[:4]),
                                            face_box=tuple(vals[4:])))
        if len(regions) != n:
            raise ClipFormatError(f"{regions_path}: {len(regions)} rows for {n} frames")

    return ClipRecord(frames=frames, audio=audio, regions=regions, fps=fps,
                      beat_times=beats)
