"""Command-line interface.

Subcommands: ``gen-data``, ``train-stage1``, ``train-stage2``, ``infer``,
``eval``. Every command accepts ``--config PATH`` (flat key=value file),
``--seed N`` and repeated ``--set key=value`` overrides. Exit codes:
0 success, 2 configuration/validation failure, 3 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ExperimentConfig, apply_overrides, load_config, require_valid, validate
from .errors import ClipFormatError, ConfigError, ContractError, DataError
from .pipeline import dump_delta_maps, evaluate, infer, write_generated_clip
from .synthetic import SceneSpec, generate_clip, read_clip, write_clip
from .training import train_stage1, train_stage2

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value config file (defaults used when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a single config key")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    problems = validate(cfg)
    if problems:
        raise ConfigError("invalid configuration:\n"
                          + "\n".join(f"  - {p}" for p in problems))
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    intervals = (0.5, 0.6, 0.4)
    phases = (0.5, 0.4, 0.6, 0.3)
    for i in range(args.clips):
        spec = SceneSpec(image_size=cfg.image_size, fps=args.fps,
                         audio_dim=cfg.audio_dim,
                         beat_interval_s=intervals[i % len(intervals)],
                         beat_phase_s=phases[i % len(phases)])
        clip = generate_clip(spec, args.duration, seed=cfg.seed + i)
        write_clip(clip, out / f"clip{i:04d}")
    print(f"wrote {args.clips} clips to {out}")
    return EXIT_OK


def _cmd_train_stage1(args) -> int:
    cfg = _resolve_config(args)
    result = train_stage1(cfg, data_dir=args.data, out_dir=args.out, resume=args.resume)
    print(f"stage-1 checkpoint: {result.checkpoint} (step {result.steps_run})")
    return EXIT_OK


def _cmd_train_stage2(args) -> int:
    cfg = _resolve_config(args)
    result = train_stage2(cfg, args.stage1, data_dir=args.data, out_dir=args.out,
                          resume=args.resume)
    print(f"stage-2 checkpoint: {result.checkpoint} (step {result.steps_run})")
    return EXIT_OK


def _cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    if args.dataset is not None:
        data_dir = Path(args.dataset)
        names = sorted(p.name for p in data_dir.iterdir()
                       if p.is_dir() and (p / "manifest.txt").exists())
        if not names:
            raise DataError(f"no clip directories under {data_dir}")
        sources = [(name, read_clip(data_dir / name)) for name in names]
    elif args.source_clip is not None:
        clip = read_clip(args.source_clip)
        sources = [(Path(args.source_clip).name, clip)]
    else:
        raise ConfigError("infer needs --dataset or --source-clip")
    for name, clip in sources:
        length = args.length if args.length is not None else clip.n_frames
        result = infer(cfg, args.stage1, args.stage2, clip.frames[0], clip.audio,
                       length, cfg.seed, collect_deltas=args.dump_deviation is not None)
        write_generated_clip(result, clip.audio, clip.fps, out / name,
                             beat_times=clip.beat_times)
        if args.dump_deviation is not None:
            dump_delta_maps(result, Path(args.dump_deviation) / name)
        print(f"generated {length} frames for {name}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    report = Path(args.report)
    rows = evaluate(cfg, args.generated, args.reference, report, stage1_ckpt=args.stage1)
    summary = rows[-1]
    print(f"report: {report}")
    print("summary: " + ", ".join(f"{k}={summary[k]:.4g}" for k in
                                  ("fgd", "div", "bas", "fvd", "psnr_full", "ssim_full")))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gesturegen",
                                     description="Audio-driven gesture video generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic clip dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--duration", type=float, default=4.0, help="clip length in seconds")
    p.add_argument("--fps", type=int, default=10)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train the reconstruction model")
    _add_common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: config)")
    p.add_argument("--out", default=None, help="run directory (default: config)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the motion diffusion model")
    _add_common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=_cmd_train_stage2)

    p = sub.add_parser("infer", help="generate gesture video frames")
    _add_common(p)
    p.add_argument("--stage1", required=True)
    p.add_argument("--stage2", required=True)
    p.add_argument("--dataset", default=None,
                   help="generate one output per clip in this dataset")
    p.add_argument("--source-clip", default=None,
                   help="single clip directory supplying source frame and audio")
    p.add_argument("--length", type=int, default=None,
                   help="frames to generate (default: clip length)")
    p.add_argument("--out", required=True, help="directory for generated clips")
    p.add_argument("--dump-deviation", default=None,
                   help="also write per-frame gate heatmaps here")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="score generated clips against references")
    _add_common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--report", required=True, help="report CSV path")
    p.add_argument("--stage1", default=None,
                   help="stage-1 checkpoint for trained embeddings (optional)")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ClipFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
