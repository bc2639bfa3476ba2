"""
Run configuration: typed sections, flat ``section.key=value`` text, presets.

A config file is plain text, one ``key=value`` per line; blank and ``#`` lines
are skipped. An optional ``preset=<name>`` line picks the base the remaining keys
override. Unknown keys and invalid values are collected and raised together.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

def output_root() -> Path:
    """Default parent of run directories; read from the environment on every call."""
    return Path(os.environ.get("MIDWAY_OUTPUT_ROOT", "runs"))


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 12
    embed_dim: int = 64
    heads: int = 4
    tap_levels: tuple[int, ...] = (3, 6, 9)
    top_level: int = 12
    use_cls_token: bool = True
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def exported_levels(self) -> tuple[int, ...]:
        return tuple(self.tap_levels) + (self.top_level,)


@dataclass(frozen=True)
class DynamicsConfig:
    midway_dim: int = 192
    midway_heads: int = 4
    midway_blocks: int = 4
    backward_blocks: int = 1
    forward_blocks: int = 4
    num_motion_tokens: int = 10
    gate_bias: float = 4.0
    backward_kv_pos: bool = True
    # component toggles (ablation table columns)
    latent_dynamics: bool = True
    backward: bool = True
    multi_level: bool = True
    refinement: bool = True
    gating: bool = True


@dataclass(frozen=True)
class InvarianceConfig:
    enabled: bool = True
    num_global: int = 2
    num_local: int = 8
    prototypes: int = 4096
    head_hidden: int = 2048
    head_bottleneck: int = 256
    head_layers: int = 3
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    center_momentum: float = 0.9


@dataclass(frozen=True)
class ObjectiveConfig:
    level_reduction: str = "mean"
    train_eps: float = 1e-6
    divergence_threshold: float = 1e4


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    betas: tuple[float, float] = (0.9, 0.999)
    clip_grad: float = 3.0
    momentum_teacher: float = 0.996
    momentum_teacher_end: float = 1.0
    use_fp16: bool = False


@dataclass(frozen=True)
class SamplingConfig:
    dt_range: tuple[float, float] = (0.5, 1.0)
    repeats_per_video: int = 5
    output_resolution: int = 64
    local_resolution: int = 32
    dense_area: tuple[float, float] = (0.2, 0.4)
    inv_area: tuple[float, float] = (0.05, 0.2)
    global_area: tuple[float, float] = (0.4, 1.0)
    local_area: tuple[float, float] = (0.3, 0.8)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)


@dataclass(frozen=True)
class AugmentConfig:
    dense_flip: bool = False
    dense_color_jitter: bool = False
    inv_flip: bool = True
    inv_color_jitter: bool = True
    jitter_strength: float = 0.4


@dataclass(frozen=True)
class SpritesConfig:
    canvas: int = 64
    num_sprites: int = 3
    size_range: tuple[int, int] = (8, 16)
    max_speed: int = 3
    integer_velocity: bool = True
    patch_aligned: bool = False
    shared_direction: bool = True
    texture: bool = True
    fps: float = 30.0
    num_videos: int = 32
    num_frames: int = 60


@dataclass(frozen=True)
class AnalysisConfig:
    k: int = 8
    tangent_scale: float = 1.0
    levels: tuple[int, ...] = ()
    heatmap_level: int = 0
    top_k: int = 5
    reanchor: bool = True


@dataclass(frozen=True)
class ProbeConfig:
    ridge: float = 1e-2
    pairs: int = 500
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    invariance: InvarianceConfig = field(default_factory=InvarianceConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sprites: SpritesConfig = field(default_factory=SpritesConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    epochs: int = 300
    batch_size: int = 200
    device: str = "auto"
    dtype: str = "float32"
    num_workers: int = 0
    output_dir: str = ""
    checkpoint_every: int = 10
    max_steps: int = 0
    ablation_steps: int = 200


_SECTIONS = (
    "encoder",
    "dynamics",
    "invariance",
    "objective",
    "optim",
    "sampling",
    "augment",
    "sprites",
    "analysis",
    "probe",
)


def paper_preset() -> RunConfig:
    """Full-scale hyperparameters (ViT-S encoder, 224 px crops)."""
    return RunConfig(
        encoder=EncoderConfig(
            image_size=224, patch_size=16, embed_dim=384, heads=6, drop_path_rate=0.1
        ),
        dynamics=DynamicsConfig(midway_dim=192),
        invariance=InvarianceConfig(),
        optim=OptimConfig(use_fp16=True),
        sampling=SamplingConfig(output_resolution=224, local_resolution=96),
        epochs=300,
        batch_size=200,
    )


def toy_preset() -> RunConfig:
    """Desk-scale settings for the sprite corpus."""
    return RunConfig(
        encoder=EncoderConfig(),
        dynamics=DynamicsConfig(midway_dim=64),
        invariance=InvarianceConfig(
            prototypes=256,
            head_hidden=256,
            head_bottleneck=64,
            teacher_temp_warmup_epochs=2,
        ),
        optim=OptimConfig(warmup_epochs=1, min_lr=1e-5),
        sampling=SamplingConfig(output_resolution=64, local_resolution=32),
        sprites=SpritesConfig(),
        epochs=10,
        batch_size=16,
        checkpoint_every=1,
    )


PRESETS = {"paper": paper_preset, "toy": toy_preset}


def get_preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError([f"unknown preset {name!r} (choose from {', '.join(PRESETS)})"])


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    if origin is tuple:
        args = typing.get_args(annotation)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(parts)}")
        return tuple(_coerce(p, a) for p, a in zip(parts, args))
    if annotation is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    return raw.strip()


def _section_fields(cls: type) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def iter_items(cfg: RunConfig) -> Iterable[tuple[str, str]]:
    """Yield ``(dotted_key, text_value)`` in canonical order."""
    for name, annotation in _section_fields(RunConfig).items():
        value = getattr(cfg, name)
        if name in _SECTIONS:
            for sub in fields(value):
                yield f"{name}.{sub.name}", _format_value(getattr(value, sub.name))
        else:
            yield name, _format_value(value)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    return "".join(f"{k}={v}\n" for k, v in iter_items(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def apply_overrides(cfg: RunConfig, pairs: Iterable[tuple[str, str]]) -> RunConfig:
    """Apply ``(dotted_key, raw_value)`` pairs, collecting every bad key or value."""
    problems: list[str] = []
    top_hints = _section_fields(RunConfig)
    section_updates: dict[str, dict[str, Any]] = {}
    top_updates: dict[str, Any] = {}

    for key, raw in pairs:
        if "." in key:
            section, _, sub = key.partition(".")
            if section not in _SECTIONS:
                problems.append(f"unknown key {key!r}")
                continue
            hints = _section_fields(type(getattr(cfg, section)))
            if sub not in hints:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                section_updates.setdefault(section, {})[sub] = _coerce(raw, hints[sub])
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        else:
            if key not in top_hints or key in _SECTIONS:
                problems.append(f"unknown key {key!r}")
                continue
            try:
                top_updates[key] = _coerce(raw, top_hints[key])
            except ValueError as exc:
                problems.append(f"{key}: {exc}")

    if problems:
        raise ConfigError(problems)

    for section, updates in section_updates.items():
        top_updates[section] = replace(getattr(cfg, section), **updates)
    return replace(cfg, **top_updates)


def parse_pairs(lines: Iterable[str]) -> list[tuple[str, str]]:
    """Split ``key=value`` lines; blank and ``#`` lines are skipped."""
    pairs: list[tuple[str, str]] = []
    problems: list[str] = []
    for lineno, line in enumerate(lines, start=1):
        entry = line.strip()
        if not entry or entry.startswith("#"):
            continue
        if "=" not in entry:
            problems.append(f"line {lineno}: expected key=value, got {entry!r}")
            continue
        key, _, value = entry.partition("=")
        pairs.append((key.strip(), value.strip()))
    if problems:
        raise ConfigError(problems)
    return pairs


def parse_config(text: str, *, base: RunConfig | None = None) -> RunConfig:
    """Parse config text over *base* (or the ``preset=`` line, or the toy preset)."""
    pairs = parse_pairs(text.splitlines())
    preset_names = [v for k, v in pairs if k == "preset"]
    pairs = [(k, v) for k, v in pairs if k != "preset"]
    if base is None:
        base = get_preset(preset_names[-1]) if preset_names else toy_preset()
    return apply_overrides(base, pairs)


def load_config(path: str | Path, *, base: RunConfig | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), base=base)
    validate_config(cfg)
    return cfg


def _check_range(problems: list[str], key: str, pair: tuple[float, float], lo: float, hi: float):
    a, b = pair
    if not (lo < a <= b <= hi):
        problems.append(f"{key}: expected {lo} < min <= max <= {hi}, got {a},{b}")


def validate_config(cfg: RunConfig) -> RunConfig:
    """Raise ``ConfigError`` listing every violated invariant."""
    problems: list[str] = []
    enc, dyn, inv, opt, smp = cfg.encoder, cfg.dynamics, cfg.invariance, cfg.optim, cfg.sampling

    if enc.patch_size < 1 or enc.image_size % enc.patch_size:
        problems.append(
            f"encoder.image_size ({enc.image_size}) must be divisible by "
            f"encoder.patch_size ({enc.patch_size})"
        )
    taps = list(enc.tap_levels)
    if not taps:
        problems.append("encoder.tap_levels must not be empty")
    elif any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1:
        problems.append(f"encoder.tap_levels must be strictly increasing and >= 1: {taps}")
    if taps and not (max(taps) < enc.top_level <= enc.depth):
        problems.append(
            f"need max(tap_levels) < top_level <= depth, got {max(taps)}, "
            f"{enc.top_level}, {enc.depth}"
        )
    if enc.heads < 1 or enc.embed_dim % enc.heads:
        problems.append(f"encoder.embed_dim ({enc.embed_dim}) not divisible by heads ({enc.heads})")
    if not 0.0 <= enc.drop_path_rate < 1.0:
        problems.append("encoder.drop_path_rate must be in [0, 1)")

    for key in ("midway_dim", "midway_heads", "midway_blocks", "backward_blocks",
                "forward_blocks", "num_motion_tokens"):
        if getattr(dyn, key) < 1:
            problems.append(f"dynamics.{key} must be >= 1")
    if dyn.midway_heads >= 1 and dyn.midway_dim % dyn.midway_heads:
        problems.append("dynamics.midway_dim must be divisible by dynamics.midway_heads")
    if dyn.latent_dynamics and dyn.refinement and len(taps) < 2:
        problems.append("dynamics.refinement requires at least two tap levels")

    if inv.num_global < 1:
        problems.append("invariance.num_global must be >= 1")
    if inv.num_local < 0:
        problems.append("invariance.num_local must be >= 0")
    if min(inv.student_temp, inv.teacher_temp_start, inv.teacher_temp_end) <= 0:
        problems.append("invariance temperatures must be > 0")
    if not 0.0 <= inv.center_momentum < 1.0:
        problems.append("invariance.center_momentum must be in [0, 1)")
    if inv.head_layers < 1 or inv.prototypes < 1:
        problems.append("invariance head needs >= 1 layer and >= 1 prototype")

    if cfg.objective.level_reduction not in ("mean", "sum"):
        problems.append("objective.level_reduction must be 'mean' or 'sum'")

    for key in ("momentum_teacher", "momentum_teacher_end"):
        if not 0.0 <= getattr(opt, key) <= 1.0:
            problems.append(f"optim.{key} must be in [0, 1]")
    if opt.lr <= 0 or opt.clip_grad < 0:
        problems.append("optim.lr must be > 0 and optim.clip_grad >= 0")

    _check_range(problems, "sampling.dt_range", smp.dt_range, 0.0, float("inf"))
    _check_range(problems, "sampling.dense_area", smp.dense_area, 0.0, 1.0)
    _check_range(problems, "sampling.inv_area", smp.inv_area, 0.0, 1.0)
    _check_range(problems, "sampling.global_area", smp.global_area, 0.0, 1.0)
    _check_range(problems, "sampling.local_area", smp.local_area, 0.0, 1.0)
    if smp.repeats_per_video < 1:
        problems.append("sampling.repeats_per_video must be >= 1")
    if smp.output_resolution != enc.image_size:
        problems.append("sampling.output_resolution must equal encoder.image_size")
    if smp.local_resolution % enc.patch_size:
        problems.append("sampling.local_resolution must be divisible by encoder.patch_size")

    if cfg.analysis.k < 1:
        problems.append("analysis.k must be >= 1")
    bad_levels = [lvl for lvl in cfg.analysis.levels if lvl not in taps]
    if bad_levels:
        problems.append(f"analysis.levels not in tap_levels: {bad_levels}")
    if cfg.analysis.heatmap_level and cfg.analysis.heatmap_level not in taps:
        problems.append("analysis.heatmap_level must be 0 (lowest tap) or a tap level")

    if cfg.sprites.size_range[0] < 1 or cfg.sprites.size_range[0] > cfg.sprites.size_range[1]:
        problems.append("sprites.size_range must satisfy 1 <= min <= max")
    if cfg.sprites.fps <= 0:
        problems.append("sprites.fps must be > 0")

    if cfg.epochs < 1 or cfg.batch_size < 1:
        problems.append("epochs and batch_size must be >= 1")
    if cfg.dtype not in ("float32", "float64"):
        problems.append("dtype must be float32 or float64")
    if cfg.num_workers < 0:
        problems.append("num_workers must be >= 0")

    if problems:
        raise ConfigError(problems)
    return cfg


def as_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)
