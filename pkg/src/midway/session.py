"""
A training run on disk: dataset, model, loss log, checkpoints and plot under
one run directory, with resume from any checkpoint of the same model.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_model, load_optimizer, read_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, output_root, serialize_config, validate_config
from .dataset import open_videos
from .errors import ConfigError, DatasetError
from .model import MidwayNetwork
from .report import LOSS_LOG, LossLog, loss_columns, plot_loss_curves, read_loss_log
from .sampling import PairDataset, collate_pairs
from .train import StepReport, TrainState, build_state, fit, resolve_device, restore_rng

logger = logging.getLogger(__name__)

LAST_CHECKPOINT = "last.ckpt"
FINAL_CHECKPOINT = "final.ckpt"
# sections that fix the model's parameter layout
_MODEL_SECTIONS = ("encoder", "dynamics", "invariance")


def default_run_dir(cfg: RunConfig) -> Path:
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return output_root() / f"run-{config_hash(cfg)[:12]}"


def _check_resumable(cfg: RunConfig, saved: RunConfig) -> None:
    problems = [
        f"{name} differs from the checkpoint"
        for name in _MODEL_SECTIONS
        if getattr(cfg, name) != getattr(saved, name)
    ]
    if problems:
        raise ConfigError(problems)


def _model_dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def prepare(
    cfg: RunConfig,
    data_root: str | Path,
    run_dir: Path,
    *,
    resume: str | Path | None = None,
) -> tuple[TrainState, PairDataset]:
    """Build (or restore) the train state and the pair dataset for *cfg*."""
    validate_config(cfg)
    dataset = PairDataset(open_videos(data_root), cfg, seed=cfg.seed)
    iters = len(dataset) // cfg.batch_size
    if iters == 0:
        raise DatasetError(f"{len(dataset)} samples cannot fill a batch of {cfg.batch_size}")
    device = resolve_device(cfg.device)
    dtype = _model_dtype(cfg)

    torch.manual_seed(cfg.seed)
    if resume is None:
        model = MidwayNetwork(cfg).to(device=device, dtype=dtype)
        return build_state(model, cfg, iters, run_dir=run_dir), dataset

    ckpt = read_checkpoint(resume)
    _check_resumable(cfg, ckpt.cfg)
    model = load_model(ckpt, MidwayNetwork(cfg).to(device=device, dtype=dtype))
    state = build_state(model, cfg, iters, run_dir=run_dir)
    load_optimizer(ckpt, state)
    restore_rng(ckpt.rng)
    logger.info("resumed from %s at step %d", ckpt.path, state.step)
    return state, dataset


def train_run(
    cfg: RunConfig,
    data_root: str | Path,
    run_dir: str | Path | None = None,
    *,
    resume: str | Path | None = None,
    on_step: Callable[[StepReport], None] | None = None,
    log_every: int = 50,
) -> dict:
    """
    Train *cfg* on the dataset at *data_root*. Writes ``config.txt``,
    ``loss.tsv``, ``last.ckpt`` every ``checkpoint_every`` epochs,
    ``final.ckpt`` and ``loss.png`` under the run directory.
    """
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    state, dataset = prepare(cfg, data_root, run_dir, resume=resume)
    (run_dir / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")

    plan = state.model.dynamics.plan
    columns = loss_columns(plan.loss_levels, state.model.invariance is not None)
    last: dict[str, float] = {}

    def step_hook(report: StepReport) -> None:
        row = {"step": report.step, **report.losses}
        row.update(lr=report.lr, momentum=report.momentum, grad_norm=report.grad_norm)
        log.append(row)
        last.clear()
        last.update(report.losses)
        if log_every and report.step % log_every == 0:
            logger.info(
                "step %d total %.5g lr %.3g", report.step, report.losses["total"], report.lr
            )
        if on_step is not None:
            on_step(report)

    def epoch_hook(s: TrainState) -> None:
        if s.epoch % max(cfg.checkpoint_every, 1) == 0:
            save_checkpoint(run_dir / LAST_CHECKPOINT, s)

    with LossLog(
        run_dir / LOSS_LOG, columns, resume_step=state.step if resume is not None else None
    ) as log:
        fit(state, dataset, collate=collate_pairs, on_step=step_hook, on_epoch=epoch_hook)

    final = save_checkpoint(run_dir / FINAL_CHECKPOINT, state)
    history = read_loss_log(run_dir / LOSS_LOG)
    plot = plot_loss_curves(history, run_dir / "loss.png") if len(history["step"]) else None
    return {
        "run_dir": str(run_dir),
        "steps": state.step,
        "final_losses": last,
        "checkpoint": str(final),
        "loss_log": str(run_dir / LOSS_LOG),
        "plot": str(plot) if plot else None,
        "config_hash": config_hash(cfg),
    }


def tail_mean(history: dict[str, np.ndarray], column: str, count: int = 50) -> float:
    """Mean of the last *count* values of *column* (NaN when absent)."""
    values = history.get(column)
    if values is None or not len(values):
        return float("nan")
    return float(np.mean(values[-count:]))

