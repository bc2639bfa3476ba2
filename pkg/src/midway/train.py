"""
Optimisation: AdamW parameter groups, per-iteration schedules, the training
step, and the epoch loop with checkpointing and resume.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np
import torch
from torch.utils.data import DataLoader

from .config import RunConfig
from .encoder import ema_update
from .errors import DatasetError, DivergenceError
from .model import MidwayNetwork
from .objective import ObjectiveReport, compute_objective

logger = logging.getLogger(__name__)


def cosine_scheduler(
    base_value: float,
    final_value: float,
    epochs: int,
    niter_per_ep: int,
    warmup_epochs: int = 0,
    start_warmup_value: float = 0.0,
) -> np.ndarray:
    """Per-iteration values: linear warmup, then cosine from *base_value* to *final_value*."""
    warmup_iters = warmup_epochs * niter_per_ep
    warmup = np.array([])
    if warmup_iters > 0:
        warmup = np.linspace(start_warmup_value, base_value, warmup_iters)
    iters = np.arange(max(epochs * niter_per_ep - warmup_iters, 0))
    schedule = final_value + 0.5 * (base_value - final_value) * (
        1 + np.cos(np.pi * iters / max(len(iters), 1))
    )
    schedule = np.concatenate((warmup, schedule))
    if len(schedule) == 0:
        schedule = np.array([base_value])
    return schedule


_NO_DECAY = frozenset(
    {"pos_embed", "kv_pos", "cls_token", "cls_pos", "segment", "motion_type", "init"}
)


def param_groups(modules: dict[str, torch.nn.Module]) -> tuple[list[dict], list[str]]:
    """
    Split trainable parameters into a decayed group (weights) and an undecayed
    one (biases, norms, embeddings, learned tokens). Returns the groups and the
    parameter names in optimiser order.
    """
    decay: list[tuple[str, torch.nn.Parameter]] = []
    no_decay: list[tuple[str, torch.nn.Parameter]] = []
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            if not param.requires_grad:
                continue
            full = f"{prefix}.{name}"
            leaf = name.rsplit(".", 1)[-1]
            if param.ndim <= 1 or leaf in _NO_DECAY:
                no_decay.append((full, param))
            else:
                decay.append((full, param))
    groups = [
        {"params": [p for _, p in decay]},
        {"params": [p for _, p in no_decay], "weight_decay": 0.0},
    ]
    names = [n for n, _ in decay] + [n for n, _ in no_decay]
    return groups, names


@dataclass
class TrainState:
    model: MidwayNetwork
    optimizer: torch.optim.Optimizer
    param_names: list[str]
    cfg: RunConfig
    iters_per_epoch: int
    lr: np.ndarray
    wd: np.ndarray
    momentum: np.ndarray
    step: int = 0
    run_dir: Path | None = None

    @property
    def epoch(self) -> int:
        return self.step // max(self.iters_per_epoch, 1)

    def at(self, schedule: np.ndarray) -> float:
        return float(schedule[min(self.step, len(schedule) - 1)])

    def trainable_parameters(self) -> Iterator[torch.nn.Parameter]:
        for group in self.optimizer.param_groups:
            yield from group["params"]


def build_state(
    model: MidwayNetwork,
    cfg: RunConfig,
    iters_per_epoch: int,
    *,
    run_dir: Path | None = None,
) -> TrainState:
    opt = cfg.optim
    groups, names = param_groups(model.trainable_modules())
    optimizer = torch.optim.AdamW(groups, lr=opt.lr, betas=tuple(opt.betas))
    iters_per_epoch = max(iters_per_epoch, 1)
    return TrainState(
        model=model,
        optimizer=optimizer,
        param_names=names,
        cfg=cfg,
        iters_per_epoch=iters_per_epoch,
        lr=cosine_scheduler(
            opt.lr, opt.min_lr, cfg.epochs, iters_per_epoch, warmup_epochs=opt.warmup_epochs
        ),
        wd=cosine_scheduler(opt.weight_decay, opt.weight_decay_end, cfg.epochs, iters_per_epoch),
        momentum=cosine_scheduler(
            opt.momentum_teacher, opt.momentum_teacher_end, cfg.epochs, iters_per_epoch
        ),
        run_dir=run_dir,
    )


@dataclass
class StepReport:
    step: int
    losses: dict[str, float]
    lr: float
    momentum: float
    grad_norm: float
    level_order: list[int] = field(default_factory=list)


def _autocast(cfg: RunConfig, device: torch.device):
    if cfg.optim.use_fp16 and device.type == "cuda":
        return torch.autocast(device_type="cuda", dtype=torch.float16)
    return contextlib.nullcontext()


def train_step(state: TrainState, batch) -> StepReport:
    """
    One optimisation step: loss, backward, global-norm clip, AdamW with the
    scheduled lr and weight decay, EMA teacher update, step counter.
    """
    cfg = state.cfg
    model = state.model
    lr = state.at(state.lr)
    wd = state.at(state.wd)
    momentum = state.at(state.momentum)
    for i, group in enumerate(state.optimizer.param_groups):
        group["lr"] = lr
        if i == 0:
            group["weight_decay"] = wd

    device = next(model.parameters()).device
    model.train()
    with _autocast(cfg, device):
        report: ObjectiveReport = compute_objective(
            model, batch, cfg, epoch=state.epoch, eps=cfg.objective.train_eps
        )
    total = float(report.total.detach())
    if total >= cfg.objective.divergence_threshold:
        dump = _dump_divergence(state)
        raise DivergenceError(state.step, total, dump)

    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    grad_norm = 0.0
    if cfg.optim.clip_grad > 0:
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(list(state.trainable_parameters()), cfg.optim.clip_grad)
        )
    state.optimizer.step()
    ema_update(model.backbones, momentum)

    out = StepReport(
        step=state.step,
        losses=report.scalars(),
        lr=lr,
        momentum=momentum,
        grad_norm=grad_norm,
        level_order=sorted(report.level_losses),
    )
    state.step += 1
    return out


def _dump_divergence(state: TrainState) -> Path | None:
    if state.run_dir is None:
        return None
    from .checkpoint import save_checkpoint

    path = state.run_dir / "divergence.ckpt"
    try:
        save_checkpoint(path, state)
    except OSError as exc:
        logger.warning("could not write divergence dump %s: %s", path, exc)
        return None
    return path


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled full batches for one epoch, fixed by (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n - batch_size + 1, batch_size)]


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def fit(
    state: TrainState,
    dataset,
    *,
    collate: Callable,
    on_step: Callable[[StepReport], None] | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> list[StepReport]:
    """
    Train from ``state.step`` to the end of the schedule (or ``max_steps``).

    The data order and every sample's crops depend only on (seed, epoch,
    index), so a resumed run sees the same batches as an uninterrupted one.
    """
    cfg = state.cfg
    device = next(state.model.parameters()).device
    total_steps = cfg.epochs * state.iters_per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)
    reports: list[StepReport] = []
    started = time.monotonic()

    while state.step < total_steps:
        epoch = state.epoch
        skip = state.step - epoch * state.iters_per_epoch
        dataset.set_epoch(epoch)
        batches = epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)[skip:]
        if not batches:
            raise DatasetError(
                f"{len(dataset)} samples cannot fill a batch of {cfg.batch_size}"
            )
        loader: Iterable = DataLoader(
            dataset,
            batch_sampler=batches,
            collate_fn=collate,
            num_workers=cfg.num_workers,
        )
        for batch in loader:
            if state.step >= total_steps:
                break
            report = train_step(state, batch.to(device, dtype=_dtype(cfg)))
            reports.append(report)
            if on_step is not None:
                on_step(report)
        logger.info(
            "epoch %d done at step %d (%.1fs)", epoch, state.step, time.monotonic() - started
        )
        if on_epoch is not None:
            on_epoch(state)
    return reports


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def capture_rng() -> dict[str, torch.Tensor]:
    state = {"torch": torch.get_rng_state()}
    if torch.cuda.is_available():
        state["cuda"] = torch.cuda.get_rng_state()
    return state


def restore_rng(state: dict[str, torch.Tensor]) -> None:
    if "torch" in state:
        torch.set_rng_state(state["torch"])
    if "cuda" in state and torch.cuda.is_available():
        torch.cuda.set_rng_state(state["cuda"])
