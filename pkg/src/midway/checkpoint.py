"""
Single-file checkpoint archive.

Tensors live under distinct namespaces: ``student.*`` and ``teacher.*`` for the
two parameter sides, ``midway.*``, ``backward.*`` and ``forward.*`` for the
dynamics networks, ``invariance.*`` for the centre, and
``optimizer.<param>.<stat>`` for AdamW moments. A manifest lists every tensor's
name, shape and dtype next to the format version.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from ._io import atomic_write_bytes
from .config import RunConfig, parse_config, serialize_config, validate_config
from .errors import CheckpointError
from .model import MidwayNetwork

logger = logging.getLogger(__name__)

FORMAT_VERSION = "midway-ckpt/1"


def model_tensors(model: MidwayNetwork) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for key, value in model.student.state_dict().items():
        tensors[f"student.{key}"] = value
    for key, value in model.teacher.state_dict().items():
        tensors[f"teacher.{key}"] = value
    tensors.update(model.dynamics.namespaced_state())
    if model.invariance is not None:
        tensors["invariance.center"] = model.invariance.center
    return tensors


def optimizer_tensors(state) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    params = list(state.trainable_parameters())
    for name, param in zip(state.param_names, params):
        for stat, value in state.optimizer.state.get(param, {}).items():
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            tensors[f"optimizer.{name}.{stat}"] = value
    return tensors


def _manifest(tensors: dict[str, torch.Tensor]) -> list[dict[str, Any]]:
    return [
        {"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
        for name, t in tensors.items()
    ]


def save_checkpoint(path: str | Path, state, *, extra: dict[str, Any] | None = None) -> Path:
    """Write the model, optimiser moments, counters, config and RNG state atomically."""
    from .train import capture_rng

    tensors = model_tensors(state.model)
    tensors.update(optimizer_tensors(state))
    tensors = {k: v.detach().cpu().clone() for k, v in tensors.items()}
    archive = {
        "format_version": FORMAT_VERSION,
        "manifest": _manifest(tensors),
        "tensors": tensors,
        "step": state.step,
        "iters_per_epoch": state.iters_per_epoch,
        "config": serialize_config(state.cfg),
        "rng": capture_rng(),
        "extra": dict(extra or {}),
    }
    buffer = io.BytesIO()
    torch.save(archive, buffer)
    path = atomic_write_bytes(path, buffer.getvalue())
    logger.debug("checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


@dataclass
class Checkpoint:
    path: Path
    cfg: RunConfig
    tensors: dict[str, torch.Tensor]
    step: int
    iters_per_epoch: int
    rng: dict[str, torch.Tensor]
    extra: dict[str, Any]

    def namespace(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Load and validate an archive; the manifest must match the stored tensors."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable archive ({exc})") from exc
    if not isinstance(archive, dict) or archive.get("format_version") != FORMAT_VERSION:
        found = archive.get("format_version") if isinstance(archive, dict) else None
        raise CheckpointError(f"{path}: unsupported format version {found!r}")

    tensors = archive.get("tensors", {})
    listed = {entry["name"]: entry for entry in archive.get("manifest", [])}
    if set(listed) != set(tensors):
        missing = sorted(set(listed) ^ set(tensors))[:3]
        raise CheckpointError(f"{path}: manifest and tensors disagree ({', '.join(missing)})")
    for name, entry in listed.items():
        if list(tensors[name].shape) != list(entry["shape"]):
            raise CheckpointError(f"{path}: {name} shape differs from manifest")

    cfg = validate_config(parse_config(archive["config"]))
    return Checkpoint(
        path=path,
        cfg=cfg,
        tensors=tensors,
        step=int(archive.get("step", 0)),
        iters_per_epoch=int(archive.get("iters_per_epoch", 1)),
        rng=archive.get("rng", {}),
        extra=archive.get("extra", {}),
    )


def _load_module(module: torch.nn.Module, state: dict[str, torch.Tensor], what: str, path: Path):
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {what} does not match the configuration ({exc})") from exc


def load_model(ckpt: Checkpoint, model: MidwayNetwork | None = None) -> MidwayNetwork:
    """Build (or fill) a network from *ckpt*."""
    if model is None:
        from .train import _dtype

        model = MidwayNetwork(ckpt.cfg).to(_dtype(ckpt.cfg))
    _load_module(model.student, ckpt.namespace("student"), "student", ckpt.path)
    _load_module(model.teacher, ckpt.namespace("teacher"), "teacher", ckpt.path)
    dynamics = {
        k: v
        for k, v in ckpt.tensors.items()
        if k.startswith(("midway.", "backward.", "forward."))
    }
    try:
        model.dynamics.load_namespaced_state(dynamics)
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"{ckpt.path}: dynamics do not match ({exc})") from exc
    if model.invariance is not None and "invariance.center" in ckpt.tensors:
        with torch.no_grad():
            model.invariance.center.copy_(ckpt.tensors["invariance.center"])
    return model


def load_optimizer(ckpt: Checkpoint, state) -> None:
    """Restore AdamW moments and counters into a freshly built train state."""
    params = list(state.trainable_parameters())
    for name, param in zip(state.param_names, params):
        prefix = f"optimizer.{name}."
        stats = {k[len(prefix):]: v for k, v in ckpt.tensors.items() if k.startswith(prefix)}
        if stats:
            device = param.device
            state.optimizer.state[param] = {
                k: (v.to(device) if k != "step" else v.clone()) for k, v in stats.items()
            }
    state.step = ckpt.step
