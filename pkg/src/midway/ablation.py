"""
Component ablation: six cumulative variants (base up to the full model) and
three single-component removals, each trained for ``ablation_steps`` steps
and audited against the networks its toggles declare.
"""

from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import torch

from .config import RunConfig, config_hash, validate_config
from .dataset import open_videos
from .dynamics import BackwardRefiner, ForwardPredictor, GateUnit, MidwayInverse, plan_levels
from .errors import ConfigError, classify_exception, error_record
from .model import MidwayNetwork
from .report import plot_ablation, read_loss_log, write_table
from .session import FINAL_CHECKPOINT, tail_mean, train_run

logger = logging.getLogger(__name__)

TOGGLES = ("latent_dynamics", "backward", "multi_level", "refinement", "gating")

_ALL_ON = dict.fromkeys(TOGGLES, True)
_ALL_OFF = dict.fromkeys(TOGGLES, False)

ABLATION_ROWS: tuple[tuple[str, dict[str, bool]], ...] = (
    ("1-base", _ALL_OFF),
    ("2-latent", {**_ALL_OFF, "latent_dynamics": True}),
    ("3-backward", {**_ALL_OFF, "latent_dynamics": True, "backward": True}),
    ("4-multi-level", {**_ALL_ON, "refinement": False, "gating": False}),
    ("5-refinement", {**_ALL_ON, "gating": False}),
    ("6-gating", _ALL_ON),
    ("7-no-backward", {**_ALL_ON, "backward": False}),
    ("8-no-multi-level", {**_ALL_ON, "multi_level": False}),
    ("9-no-refinement", {**_ALL_ON, "refinement": False}),
)

TABLE_COLUMNS = (
    ["row"]
    + list(TOGGLES)
    + ["dynamics_params", "steps", "final_dyn", "final_total"]
    + ["probe_direction", "probe_shape", "config_hash", "status"]
)


def variant_config(cfg: RunConfig, toggles: dict[str, bool]) -> RunConfig:
    return replace(
        cfg,
        dynamics=replace(cfg.dynamics, **toggles),
        max_steps=cfg.ablation_steps,
    )


def full_config(cfg: RunConfig) -> RunConfig:
    return variant_config(cfg, _ALL_ON)


def _count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expected_parameters(cfg: RunConfig) -> dict[str, int]:
    """Dynamics parameter counts implied by the toggles, from one network of each kind."""
    enc, dyn = cfg.encoder, cfg.dynamics
    counts = {"midway": 0, "backward": 0, "forward": 0, "gates": 0}
    if not dyn.latent_dynamics:
        return counts
    plan = plan_levels(enc, dyn)
    n, dim = enc.num_tokens, enc.embed_dim
    counts["midway"] = len(plan.midway_levels) * _count(MidwayInverse(dim, n, dyn)) + (
        dyn.num_motion_tokens * dyn.midway_dim
    )
    counts["backward"] = len(plan.backward_levels) * _count(
        BackwardRefiner(dim, enc.heads, n, blocks=dyn.backward_blocks, kv_pos=dyn.backward_kv_pos)
    )
    predictor = ForwardPredictor(dim, enc.heads, n, dyn)
    gates = sum(_count(m) for m in predictor.modules() if isinstance(m, GateUnit))
    counts["forward"] = len(plan.predict_levels) * (_count(predictor) - gates)
    counts["gates"] = len(plan.predict_levels) * gates
    return counts


def audit(name: str, cfg: RunConfig, model: MidwayNetwork) -> list[str]:
    """Mismatches between the built model and the components its toggles declare."""
    dyn = cfg.dynamics
    taps = len(cfg.encoder.tap_levels)
    manifest = model.component_manifest()
    actual = model.component_parameters()
    problems = []
    declared = {
        "midway": (taps if dyn.refinement else 1) if dyn.latent_dynamics else 0,
        "backward": taps if dyn.latent_dynamics and dyn.backward else 0,
        "loss_levels": (taps if dyn.multi_level else 1) if dyn.latent_dynamics else 0,
    }
    for key, want in declared.items():
        if manifest[key] != want:
            problems.append(f"{name}: {key} networks {manifest[key]} != declared {want}")
    if dyn.gating != (manifest["gates"] > 0) and dyn.latent_dynamics and dyn.forward_blocks > 1:
        problems.append(f"{name}: gating toggle disagrees with {manifest['gates']} gates")
    for key, want in expected_parameters(cfg).items():
        if actual[key] != want:
            problems.append(f"{name}: {key} has {actual[key]} parameters, expected {want}")
    return problems


def cover_steps(cfg: RunConfig, iters_per_epoch: int) -> RunConfig:
    """*cfg* with just enough epochs for its schedule to run ``ablation_steps`` steps."""
    if cfg.ablation_steps <= 0 or iters_per_epoch <= 0:
        return cfg
    return replace(cfg, epochs=-(-cfg.ablation_steps // iters_per_epoch))


def validate_rows(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Build and validate every variant before any training starts."""
    variants = []
    for name, toggles in ABLATION_ROWS:
        variant = variant_config(cfg, toggles)
        try:
            validate_config(variant)
        except ConfigError as exc:
            raise ConfigError([f"row {name}: {p}" for p in exc.problems]) from exc
        variants.append((name, variant))
    return variants


def run_ablation(
    cfg: RunConfig,
    data_root: str | Path,
    out_dir: str | Path,
    *,
    probes: bool = True,
    progress: Callable[[str, dict], None] | None = None,
) -> dict:
    """
    Train every variant under ``out_dir/<row>`` and write ``ablation.tsv`` and
    ``ablation.png``. A failing row is recorded and the remaining rows still run.
    """
    from .checkpoint import load_model, read_checkpoint
    from .probe import run_probe

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = open_videos(data_root)
    cfg = cover_steps(cfg, len(videos) * cfg.sampling.repeats_per_video // cfg.batch_size)
    variants = validate_rows(cfg)
    with_probes = probes and all(v.has_ground_truth() for v in videos)
    if probes and not with_probes:
        logger.warning("dataset has no ground truth; probe columns left empty")

    rows: list[dict] = []
    for name, variant in variants:
        start = time.monotonic_ns()
        toggles = {key: getattr(variant.dynamics, key) for key in TOGGLES}
        row: dict = {"row": name, **toggles, "config_hash": config_hash(variant)}
        try:
            torch.manual_seed(variant.seed)
            problems = audit(name, variant, MidwayNetwork(variant))
            if problems:
                raise ConfigError(problems)
            summary = train_run(variant, data_root, out_dir / name, log_every=0)
            history = read_loss_log(summary["loss_log"])
            model = load_model(read_checkpoint(out_dir / name / FINAL_CHECKPOINT))
            params = model.component_parameters()
            row.update(
                dynamics_params=sum(params[k] for k in ("midway", "backward", "forward", "gates")),
                steps=summary["steps"],
                final_dyn=tail_mean(history, "dyn", 10),
                final_total=tail_mean(history, "total", 10),
                status="ok",
            )
            if not toggles["latent_dynamics"]:
                row["final_dyn"] = float("nan")
            if with_probes:
                seed = variant.seed
                if toggles["latent_dynamics"]:
                    direction = run_probe(model, videos, "direction", seed=seed)
                    row["probe_direction"] = direction.accuracy
                row["probe_shape"] = run_probe(model, videos, "shape", seed=seed).accuracy
            record = {"source": name, "elapsed_ms": (time.monotonic_ns() - start) // 1_000_000}
        except Exception as exc:
            info = classify_exception(exc)
            row["status"] = f"error:{info.category}"
            record = error_record(
                name, info, elapsed_ms=(time.monotonic_ns() - start) // 1_000_000, exc=exc
            )
        rows.append(row)
        if progress:
            progress(name, record)

    table = write_table(out_dir / "ablation.tsv", TABLE_COLUMNS, rows)
    plot = plot_ablation(rows, out_dir / "ablation.png")
    failed = sum(1 for r in rows if r["status"] != "ok")
    return {
        "total": len(rows),
        "succeeded": len(rows) - failed,
        "failed": failed,
        "table": str(table),
        "plot": str(plot),
        "rows": rows,
    }
