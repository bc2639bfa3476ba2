#!/usr/bin/env python3
"""Command-line interface for midway - hierarchical latent dynamics pretraining."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ._cli_common import (
    add_common_arguments,
    add_config_source_arguments,
    apply_arguments,
    command_prefix,
    emit_result,
    item_progress,
    print_resource_usage,
    resolve_config,
    setup_logging,
)
from ._io import read_png
from .config import RunConfig, config_hash, output_root
from .errors import ConfigError, exit_code_for, print_classified_error

logger = logging.getLogger("midway.cli")


def _output_dir(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.output_dir) if cfg.output_dir else output_root() / default


def _load_checkpoint_model(path: str, args: argparse.Namespace):
    """Model from *path*; command-line overrides apply to everything but the model sections."""
    from .checkpoint import load_model, read_checkpoint
    from .model import MidwayNetwork

    ckpt = read_checkpoint(path)
    cfg = apply_arguments(ckpt.cfg, args)
    cfg = replace(
        cfg,
        encoder=ckpt.cfg.encoder,
        dynamics=ckpt.cfg.dynamics,
        invariance=ckpt.cfg.invariance,
    )
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    model = load_model(ckpt, MidwayNetwork(cfg).to(dtype=dtype))
    model.eval()
    return model, cfg


def _resize(frame: np.ndarray, size: int) -> np.ndarray:
    if frame.shape[:2] == (size, size):
        return frame
    return np.asarray(Image.fromarray(frame).resize((size, size), Image.BILINEAR))


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args: argparse.Namespace) -> dict:
    from .dataset import index_frame_dirs, ingest_raw_rgb24, write_dataset

    cfg = resolve_config(args)
    root = _output_dir(cfg, "data")
    if args.from_frames:
        summary = index_frame_dirs(args.from_frames, args.fps or cfg.sprites.fps)
        root = Path(args.from_frames)
    elif args.from_raw:
        if not (args.width and args.height):
            raise ConfigError(["--from-raw needs --width and --height"])
        stream = sys.stdin.buffer if args.from_raw == "-" else open(args.from_raw, "rb")
        try:
            record = ingest_raw_rgb24(
                stream,
                args.width,
                args.height,
                root,
                fps=args.fps or cfg.sprites.fps,
                video_id=args.video_id,
            )
        finally:
            if stream is not sys.stdin.buffer:
                stream.close()
        summary = {"total": 1, "succeeded": 1, "failed": 0, "frames": record.frames}
    else:
        summary = write_dataset(
            root,
            cfg.sprites,
            num_videos=args.videos,
            num_frames=args.frames,
            seed=cfg.seed,
            patch_size=cfg.encoder.patch_size,
            workers=args.workers,
            progress=item_progress("gen-data"),
        )
    logger.info(
        "wrote %d video(s) to %s (%d ok, %d failed)",
        summary["total"],
        root,
        summary["succeeded"],
        summary["failed"],
    )
    status = "ok" if summary["failed"] == 0 else "error"
    return {"status": status, "dataset": str(root), **summary}


# ---------------------------------------------------------------- train


def cmd_train(args: argparse.Namespace) -> dict:
    cfg = resolve_config(args)
    if args.max_steps is not None:
        cfg = replace(cfg, max_steps=args.max_steps)
    optim = {
        "lr": cfg.optim.lr,
        "min_lr": cfg.optim.min_lr,
        "weight_decay": cfg.optim.weight_decay,
        "weight_decay_end": cfg.optim.weight_decay_end,
        "clip_grad": cfg.optim.clip_grad,
        "warmup_epochs": cfg.optim.warmup_epochs,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
    }
    if args.dry_run:
        return {"status": "ok", "dry_run": True, "optim": optim, "config_hash": config_hash(cfg)}
    if not args.data:
        raise ConfigError(["--data is required unless --dry-run is given"])

    from .session import default_run_dir, train_run

    summary = train_run(cfg, args.data, default_run_dir(cfg), resume=args.resume)
    logger.info("trained to step %d; checkpoint %s", summary["steps"], summary["checkpoint"])
    return {"status": "ok", "optim": optim, **summary}


# ---------------------------------------------------------------- analyze


def cmd_analyze(args: argparse.Namespace) -> dict:
    from .analysis import export_heatmap, parse_location, perturb_forward, render_heatmap
    from .sampling import to_model_input

    model, cfg = _load_checkpoint_model(args.checkpoint, args)
    analysis = cfg.analysis
    if args.k is not None:
        analysis = replace(analysis, k=args.k)
    if args.level is not None:
        analysis = replace(analysis, heatmap_level=args.level)
    size = cfg.encoder.image_size
    dtype = next(model.parameters()).dtype
    frame_src, frame_tgt = (read_png(p) for p in args.frames)
    location = parse_location(args.location)

    heatmap = perturb_forward(
        model,
        to_model_input(frame_src, size).to(dtype),
        to_model_input(frame_tgt, size).to(dtype),
        location,
        analysis,
        seed=cfg.seed,
    )
    out = _output_dir(cfg, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    stem = f"heatmap_r{location[0]}_c{location[1]}"
    matrix = export_heatmap(heatmap, out / f"{stem}.bin")
    overlay = render_heatmap(heatmap, _resize(frame_tgt, size), out / f"{stem}.png")
    if heatmap.zero_tangent:
        logger.warning("output tangent was all zero; heatmap is zero")
    return {
        "status": "ok",
        "heatmap": str(matrix),
        "overlay": str(overlay),
        "location": list(location),
        "peak": list(heatmap.peak),
        "k": heatmap.k,
        "level": heatmap.level,
        "zero_tangent": heatmap.zero_tangent,
        "tangent_norms": heatmap.tangent_norms,
    }


# ---------------------------------------------------------------- track


def _track_frames(args: argparse.Namespace) -> list[np.ndarray]:
    if args.video:
        paths = sorted(Path(args.video).glob("frame_*.png"))
        if not paths:
            raise FileNotFoundError(f"no frame_*.png files in {args.video}")
    else:
        paths = [Path(p) for p in args.frames]
    frames = [read_png(p) for p in paths]
    return frames[: args.max_frames] if args.max_frames else frames


def cmd_track(args: argparse.Namespace) -> dict:
    from .analysis import parse_location, track

    model, cfg = _load_checkpoint_model(args.checkpoint, args)
    analysis = cfg.analysis
    if args.top_k is not None:
        analysis = replace(analysis, top_k=args.top_k)
    if args.fixed_reference:
        analysis = replace(analysis, reanchor=False)
    frames = _track_frames(args)
    result = track(model, frames, parse_location(args.start), analysis, seed=cfg.seed)

    out = _output_dir(cfg, "track")
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# frame\trow\tcol\theatmap_score\tsimilarity"]
    for i, (row, col) in enumerate(result.locations):
        heat, sim = result.scores[i - 1] if i else (float("nan"), float("nan"))
        lines.append(f"{i}\t{row}\t{col}\t{heat!r}\t{sim!r}")
    table = out / "track.tsv"
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {
        "status": "ok",
        "frames": len(frames),
        "locations": [list(loc) for loc in result.locations],
        "table": str(table),
    }


# ---------------------------------------------------------------- probe


def cmd_probe(args: argparse.Namespace) -> dict:
    from .dataset import open_videos
    from .probe import TASKS, run_probe

    model, cfg = _load_checkpoint_model(args.checkpoint, args)
    videos = open_videos(args.data)
    tasks = TASKS if args.task == "both" else (args.task,)
    reports = [
        run_probe(model, videos, task, seed=cfg.seed, shuffle_labels=args.shuffle_labels)
        for task in tasks
    ]
    for report in reports:
        logger.info(
            "%s: accuracy %.3f (chance %.3f) on %s",
            report.task,
            report.accuracy,
            report.chance,
            report.feature_source,
        )
        if report.verdict == "degraded":
            logger.warning("%s probe degraded: accuracy %.3f", report.task, report.accuracy)
    return {"status": "ok", "reports": [r.as_dict() for r in reports]}


# ---------------------------------------------------------------- ablate


def cmd_ablate(args: argparse.Namespace) -> dict:
    from .ablation import run_ablation

    cfg = resolve_config(args)
    if args.steps is not None:
        cfg = replace(cfg, ablation_steps=args.steps)
    out = _output_dir(cfg, "ablation")
    summary = run_ablation(
        cfg, args.data, out, probes=not args.no_probes, progress=item_progress("ablate")
    )
    logger.info(
        "%d row(s): %d ok, %d failed; table %s",
        summary["total"],
        summary["succeeded"],
        summary["failed"],
        summary["table"],
    )
    status = "ok" if summary["failed"] == 0 else "error"
    return {"status": status, **summary}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "track": cmd_track,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="midway",
        description="Hierarchical latent dynamics pretraining on video frame pairs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --out data/sprites --videos 32 --frames 60 --workers 4
  %(prog)s gen-data --from-frames data/natural --fps 30
  ffmpeg -i clip.mp4 -f rawvideo -pix_fmt rgb24 - |
      %(prog)s gen-data --from-raw - --width 320 --height 240 --out data/clip
  %(prog)s train --data data/sprites --preset toy --out runs/toy
  %(prog)s train --data data/sprites --resume runs/toy/last.ckpt --out runs/toy
  %(prog)s train --preset paper --dry-run
  %(prog)s analyze --checkpoint runs/toy/final.ckpt --frames a.png b.png --location 3,4
  %(prog)s track --checkpoint runs/toy/final.ckpt --video data/sprites/video_0000 --start 3,4
  %(prog)s probe --checkpoint runs/toy/final.ckpt --data data/sprites --task both
  %(prog)s ablate --data data/sprites --out runs/ablation --steps 200
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="Generate or index a video dataset")
    add_config_source_arguments(p)
    add_common_arguments(p)
    source = p.add_mutually_exclusive_group()
    source.add_argument("--from-frames", metavar="DIR", help="Index frame_*.png subdirectories")
    source.add_argument("--from-raw", metavar="PATH", help="Raw rgb24 frame stream (- for stdin)")
    p.add_argument("--videos", type=int, metavar="N", help="Synthetic videos (default: config)")
    p.add_argument("--frames", type=int, metavar="N", help="Frames per video (default: config)")
    p.add_argument("--workers", type=int, default=1, metavar="N", help="Parallel workers")
    p.add_argument("--width", type=int, help="Raw frame width")
    p.add_argument("--height", type=int, help="Raw frame height")
    p.add_argument("--fps", type=float, help="Frame rate of ingested video")
    p.add_argument("--video-id", help="Video id for --from-raw")

    p = sub.add_parser("train", help="Pretrain on a dataset")
    add_config_source_arguments(p)
    add_common_arguments(p)
    p.add_argument("--data", metavar="DIR", help="Dataset root with manifest.tsv")
    p.add_argument("--resume", metavar="CKPT", help="Continue from a checkpoint")
    p.add_argument("--max-steps", type=int, metavar="N", help="Stop after N total steps")
    p.add_argument("--dry-run", action="store_true", help="Validate and echo the config only")

    p = sub.add_parser("analyze", help="Forwarded perturbation heatmap for one frame pair")
    add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--frames", nargs=2, required=True, metavar=("SRC", "TGT"))
    p.add_argument("--location", required=True, metavar="ROW,COL", help="Source token")
    p.add_argument("--k", type=int, help="Random tangents to average (default: 8)")
    p.add_argument("--level", type=int, help="Scored prediction level (default: lowest)")

    p = sub.add_parser("track", help="Track a token through a video")
    add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    frames = p.add_mutually_exclusive_group(required=True)
    frames.add_argument("--video", metavar="DIR", help="Directory of frame_*.png")
    frames.add_argument("--frames", nargs="+", metavar="PNG", help="Frames in order")
    p.add_argument("--start", required=True, metavar="ROW,COL", help="Initial token")
    p.add_argument("--top-k", type=int, help="Heatmap candidates per step (default: 5)")
    p.add_argument("--max-frames", type=int, help="Use only the first N frames")
    p.add_argument(
        "--fixed-reference",
        action="store_true",
        help="Compare candidates with the initial token instead of the last tracked one",
    )

    p = sub.add_parser("probe", help="Linear probes on frozen features")
    add_common_arguments(p)
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR", help="Sprite dataset root")
    p.add_argument("--task", choices=("direction", "shape", "both"), default="both")
    p.add_argument("--shuffle-labels", action="store_true", help="Control run on shuffled labels")

    p = sub.add_parser("ablate", help="Train and probe every component ablation")
    add_config_source_arguments(p)
    add_common_arguments(p)
    p.add_argument("--data", required=True, metavar="DIR", help="Dataset root")
    p.add_argument("--steps", type=int, metavar="N", help="Steps per variant")
    p.add_argument("--no-probes", action="store_true", help="Skip the probe columns")
    return parser


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    prefix = command_prefix(command)
    setup_logging(command, args.verbose)
    code = 0
    try:
        result = HANDLERS[command](args)
        emit_result(command, **result)
        if result.get("status") != "ok":
            code = 1
    except KeyboardInterrupt:
        print(f"{prefix} interrupted", file=sys.stderr)
        emit_result(command, "error", error="interrupted", error_category="unknown")
        code = 130
    except Exception as e:
        info = print_classified_error(prefix, e)
        logger.debug("traceback", exc_info=True)
        emit_result(command, "error", error=info.message, error_category=info.category)
        code = exit_code_for(info)
    finally:
        if args.usage:
            print_resource_usage(prefix)
    if code:
        sys.exit(code)


if __name__ == "__main__":
    main()
