"""Chunked autoregressive inference and corpus evaluation.

Inference encodes the source frame once, samples motion-feature chunks
autoregressively (each chunk conditioned on the previous chunk's last
four predicted frames, zeros for the very first chunk), and renders every
frame through the flow/warp/gate/decode path of the stage-1 model.

Evaluation pairs generated and reference clip directories by name and
writes a comma-separated report whose columns follow the metric names
fgd, div, bas, fvd, and psnr/ssim per hand/lip/full region. Fréchet and
diversity numbers are encoder-relative (trained pose encoder when a
stage-1 checkpoint is supplied, seed-pinned random encoder otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .config import ExperimentConfig, require_valid
from .deviation import deviation_blend, warp
from .diffusion import Condition, sample_chunk
from .errors import DataError
from .metrics import (EmbeddingSet, RandomFrameEmbedder, RandomVideoEmbedder,
                      beat_alignment, diversity, frechet_distance,
                      gesture_beats_from_motion, psnr, ssim)
from .synthetic import ClipRecord, frames_to_tensor, read_clip, tensor_to_frames, write_clip
from .training import load_stage1_generator, load_stage2


@dataclass
class InferResult:
    frames: np.ndarray            # (L, H, W, 3) uint8
    motion_features: np.ndarray   # (L, K) float64, decoder-space values
    deltas: np.ndarray | None     # (L, H_f, W_f) float32 gate means, if requested


def _chunk_seed(seed: int, chunk: int) -> int:
    return (int(seed) * 1_000_003 + chunk) & 0xFFFFFFFFFFFFFFFF


def infer(cfg: ExperimentConfig, stage1_ckpt: str | Path, stage2_ckpt: str | Path,
          source_image: np.ndarray, audio: np.ndarray, length: int, seed: int,
          collect_deltas: bool = False) -> InferResult:
    """Generate ``length`` frames from one source image and audio rows.

    ``source_image`` is (H, W, 3) uint8; ``audio`` is (rows, A) with
    ``rows >= length``. Deterministic given ``seed``.
    """
    require_valid(cfg)
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 2 or audio.shape[1] != cfg.audio_dim:
        raise DataError(f"audio must be (rows, {cfg.audio_dim}), got {audio.shape}")
    if length < 1:
        raise DataError("length must be at least 1")
    if audio.shape[0] < length:
        raise DataError(f"audio has {audio.shape[0]} rows, need at least {length}")

    generator = load_stage1_generator(stage1_ckpt, cfg)
    denoiser, schedule, mf_mean, mf_std = load_stage2(stage2_ckpt, cfg)
    tensors, meta = ckpt.load_tensors(stage2_ckpt)
    if meta.get("finetuned_encoder"):
        ckpt.load_module(generator.pose_encoder, tensors, "pose_encoder")

    m = cfg.chunk_frames
    mean_t = torch.from_numpy(mf_mean).float()
    std_t = torch.from_numpy(mf_std).float()
    source = frames_to_tensor(source_image[None])
    with torch.no_grad():
        source_mf = (generator.pose_encoder(source) - mean_t) / std_t
        base, enhanced = generator.source_encoder(source)

    n_chunks = math.ceil(length / m)
    prev4 = torch.zeros(1, 4, cfg.latent_dim)
    rows: list[torch.Tensor] = []
    for chunk in range(n_chunks):
        lo = chunk * m
        window = audio[lo:lo + m]
        if window.shape[0] < m:  # tail chunk: repeat the last row, extra frames dropped
            pad = np.repeat(window[-1:], m - window.shape[0], axis=0)
            window = np.concatenate([window, pad], axis=0)
        cond = Condition(torch.from_numpy(window[None]).float(), prev4, source_mf)
        x = sample_chunk(denoiser, schedule, cond, _chunk_seed(seed, chunk))
        next_prev = x[:, -4:, :].clone()
        assert torch.equal(next_prev, x[:, -4:, :]), "chunk conditioning must be bit-exact"
        prev4 = next_prev
        rows.append(x[0])
    mf_norm = torch.cat(rows, dim=0)[:length]
    mf = mf_norm * std_t + mean_t

    frames = np.empty((length, cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    deltas = [] if collect_deltas else None
    with torch.no_grad():
        for lo in range(0, length, 32):
            batch = mf[lo:lo + 32]
            b = batch.shape[0]
            flow = generator.flow_decoder(generator.pose_transform(batch))
            warped = warp(enhanced.expand(b, -1, -1, -1), flow)
            if generator.use_deviation:
                margin = 1e-6 * generator.deviation_cap
                delta = generator.gate(warped).clamp(margin,
                                                     generator.deviation_cap - margin)
                base_b = base.expand(b, -1, -1, -1)
                blend = deviation_blend(base_b, generator.refiner(base_b), delta,
                                        generator.deviation_cap, validate=False)
                if deltas is not None:
                    deltas.append(delta.mean(dim=1).numpy())
            else:
                blend = warped
                if deltas is not None:
                    deltas.append(np.zeros((b, cfg.feature_size, cfg.feature_size),
                                           dtype=np.float32))
            frames[lo:lo + b] = tensor_to_frames(generator.head(blend))
    return InferResult(frames=frames,
                       motion_features=mf.double().numpy(),
                       deltas=np.concatenate(deltas) if deltas else None)


def write_generated_clip(result: InferResult, audio: np.ndarray, fps: int,
                         out_dir: str | Path, beat_times=()) -> None:
    """Persist generated frames as a standard clip directory (no regions)."""
    clip = ClipRecord(frames=result.frames,
                      audio=np.asarray(audio, dtype=np.float64)[:result.frames.shape[0]],
                      regions=None, fps=fps, beat_times=tuple(beat_times))
    write_clip(clip, out_dir)


def dump_delta_maps(result: InferResult, out_dir: str | Path) -> None:
    """Write per-frame gate means as grayscale heatmap images."""
    if result.deltas is None:
        raise DataError("inference was run without collect_deltas")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, delta in enumerate(result.deltas):
        lo, hi = float(delta.min()), float(delta.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img = ((delta - lo) * scale).astype(np.uint8)
        Image.fromarray(img, mode="L").save(out_dir / f"delta_{i:05d}.png")


REPORT_COLUMNS = ("clip_id", "fgd", "div", "bas", "fvd", "psnr_hand", "ssim_hand",
                  "psnr_lip", "ssim_lip", "psnr_full", "ssim_full")


def _fmt_metric(value: float) -> str:
    return format(float(value), ".10g")


def _list_clips(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    return {p.name: p for p in sorted(root.iterdir())
            if p.is_dir() and (p / "manifest.txt").exists()}


def evaluate(cfg: ExperimentConfig, generated_dir: str | Path, reference_dir: str | Path,
             report_path: str | Path, stage1_ckpt: str | Path | None = None) -> list[dict]:
    """Score matched generated/reference clips and write the report CSV.

    Raises :class:`DataError` (data exit code) when the clip id sets
    disagree, enumerating every unmatched id.
    """
    require_valid(cfg)
    generated = _list_clips(Path(generated_dir))
    reference = _list_clips(Path(reference_dir))
    if not generated:
        raise DataError(f"no clips found under {generated_dir} (zero matches)")
    missing_ref = sorted(set(generated) - set(reference))
    missing_gen = sorted(set(reference) - set(generated))
    if missing_ref or missing_gen:
        parts = []
        if missing_gen:
            parts.append("ids only in reference: " + ", ".join(missing_gen))
        if missing_ref:
            parts.append("ids only in generated: " + ", ".join(missing_ref))
        raise DataError("clip id mismatch; " + "; ".join(parts))

    if stage1_ckpt is not None:
        generator = load_stage1_generator(stage1_ckpt, cfg)

        def embed(frames: np.ndarray) -> np.ndarray:
            with torch.no_grad():
                return generator.pose_encoder(frames_to_tensor(frames)).double().numpy()
    else:
        frame_embedder = RandomFrameEmbedder(cfg.video_embed_seed, dim=cfg.latent_dim)
        embed = frame_embedder.embed_frames
    video_embedder = RandomVideoEmbedder(cfg.video_embed_seed)

    rows: list[dict] = []
    gen_frame_embs, ref_frame_embs = [], []
    gen_clip_embs, ref_clip_embs = [], []
    for name in sorted(generated):
        gen = read_clip(generated[name])
        ref = read_clip(reference[name])
        if gen.n_frames != ref.n_frames:
            raise DataError(f"clip {name}: generated has {gen.n_frames} frames, "
                            f"reference has {ref.n_frames}")
        ge = embed(gen.frames)
        re = embed(ref.frames)
        gen_frame_embs.append(ge)
        ref_frame_embs.append(re)
        gen_clip_embs.append(video_embedder.embed_clip(gen.frames))
        ref_clip_embs.append(video_embedder.embed_clip(ref.frames))

        row = {"clip_id": name, "div": float("nan"), "fvd": float("nan")}
        row["fgd"] = frechet_distance(EmbeddingSet(re, "ref"), EmbeddingSet(ge, "gen"))
        row["bas"] = float("nan")
        if ref.beat_times:
            beats = gesture_beats_from_motion(gen.frames_float(), gen.fps,
                                              cfg.beat_prominence)
            if beats.size:
                row["bas"] = beat_alignment(np.asarray(ref.beat_times), beats,
                                            cfg.bas_sigma)
        gf, rf = gen.frames_float(), ref.frames_float()
        for region_name, get_box in (("hand", lambda r: r.hand_box),
                                     ("lip", lambda r: r.face_box),
                                     ("full", lambda r: None)):
            p_vals, s_vals = [], []
            for i in range(gen.n_frames):
                box = get_box(ref.regions[i]) if ref.regions is not None else None
                if region_name != "full" and ref.regions is None:
                    break
                p_vals.append(psnr(rf[i], gf[i], box))
                s_vals.append(ssim(rf[i], gf[i], box))
            row[f"psnr_{region_name}"] = float(np.mean(p_vals)) if p_vals else float("nan")
            row[f"ssim_{region_name}"] = float(np.mean(s_vals)) if s_vals else float("nan")
        rows.append(row)

    summary = {"clip_id": "ALL"}
    summary["fgd"] = frechet_distance(
        EmbeddingSet(np.concatenate(ref_frame_embs), "ref"),
        EmbeddingSet(np.concatenate(gen_frame_embs), "gen"))
    summary["div"] = (diversity([EmbeddingSet(e) for e in gen_frame_embs])
                      if len(gen_frame_embs) >= 2 else float("nan"))
    summary["fvd"] = (frechet_distance(EmbeddingSet(np.stack(ref_clip_embs)),
                                       EmbeddingSet(np.stack(gen_clip_embs)))
                      if len(gen_clip_embs) >= 2 else float("nan"))
    bas_vals = [r["bas"] for r in rows if not math.isnan(r["bas"])]
    summary["bas"] = float(np.mean(bas_vals)) if bas_vals else float("nan")
    for col in ("psnr_hand", "ssim_hand", "psnr_lip", "ssim_lip", "psnr_full",
                "ssim_full"):
        vals = [r[col] for r in rows if not math.isnan(r[col])]
        summary[col] = float(np.mean(vals)) if vals else float("nan")
    rows.append(summary)

    report_path = Path(report_path)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row["clip_id"] if col == "clip_id" else _fmt_metric(row[col])
                              for col in REPORT_COLUMNS) + "\n")
    return rows
