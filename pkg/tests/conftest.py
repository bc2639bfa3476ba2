"""Shared pytest fixtures for midway tests."""

import json
from pathlib import Path

import pytest
import torch

from midway.config import RunConfig, apply_overrides, toy_preset, validate_config

# 16 px images, 4 px patches: a 4x4 token grid, three blocks, two tap levels
TINY = {
    "encoder.image_size": "16",
    "encoder.patch_size": "4",
    "encoder.depth": "3",
    "encoder.embed_dim": "16",
    "encoder.heads": "2",
    "encoder.tap_levels": "1,2",
    "encoder.top_level": "3",
    "dynamics.midway_dim": "16",
    "dynamics.midway_heads": "2",
    "dynamics.midway_blocks": "1",
    "dynamics.forward_blocks": "2",
    "dynamics.num_motion_tokens": "2",
    "invariance.num_global": "2",
    "invariance.num_local": "2",
    "invariance.prototypes": "32",
    "invariance.head_hidden": "32",
    "invariance.head_bottleneck": "8",
    "sampling.output_resolution": "16",
    "sampling.local_resolution": "8",
    "sampling.repeats_per_video": "2",
    "sprites.canvas": "32",
    "sprites.size_range": "4,8",
    "sprites.fps": "10",
    "sprites.num_videos": "4",
    "sprites.num_frames": "12",
    "dtype": "float64",
    "batch_size": "2",
    "epochs": "2",
    "checkpoint_every": "1",
}


def make_config(**overrides: str) -> RunConfig:
    """Tiny double-precision config; keyword names use ``__`` for the section dot."""
    pairs = dict(TINY)
    pairs.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return validate_config(apply_overrides(toy_preset(), pairs.items()))


def tiny_model(cfg: RunConfig | None = None, seed: int = 0):
    from midway.model import MidwayNetwork

    cfg = cfg or make_config()
    torch.manual_seed(seed)
    return MidwayNetwork(cfg).to(torch.float64)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return make_config()


@pytest.fixture
def grad_cfg() -> RunConfig:
    """Depth-2, dim-16 instance with one tap level below the top."""
    return make_config(
        encoder__depth=2,
        encoder__tap_levels=1,
        encoder__top_level=2,
        dynamics__refinement="false",
    )


@pytest.fixture(scope="session")
def sprite_root(tmp_path_factory) -> Path:
    """Four 12-frame sprite videos at 10 fps, written once per session."""
    from midway.dataset import write_dataset

    root = tmp_path_factory.mktemp("sprites")
    cfg = make_config()
    summary = write_dataset(root, cfg.sprites, seed=0, patch_size=4, workers=1)
    assert summary["failed"] == 0
    return root


@pytest.fixture(scope="session")
def toy_sprite_root(tmp_path_factory) -> Path:
    """The toy preset's full sprite corpus (32 videos of 60 frames at 64 px)."""
    from midway.dataset import write_dataset

    cfg = toy_preset()
    root = tmp_path_factory.mktemp("toy-sprites")
    summary = write_dataset(
        root, cfg.sprites, seed=cfg.seed, patch_size=cfg.encoder.patch_size, workers=2
    )
    assert summary["failed"] == 0
    return root


@pytest.fixture(scope="session")
def toy_run(toy_sprite_root, tmp_path_factory) -> tuple[RunConfig, dict]:
    """Toy-preset training run, 200 steps, long enough for 50-step loss windows."""
    from midway.session import train_run

    cfg = validate_config(apply_overrides(toy_preset(), [("epochs", "20")]))
    run = tmp_path_factory.mktemp("toy-run")
    return cfg, train_run(cfg, toy_sprite_root, run, log_every=0)


@pytest.fixture
def result_schema() -> dict:
    """Load result-schema.json from the package."""
    schema_path = Path(__file__).resolve().parent.parent / "src" / "midway" / "result-schema.json"
    with open(schema_path, encoding="utf-8") as f:
        return json.load(f)


def random_images(*shape, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def make_batch(cfg: RunConfig, batch: int = 2, seed: int = 0):
    """Random double-precision batch with every crop the objective reads."""
    from midway.sampling import PairBatch

    res, local = cfg.sampling.output_resolution, cfg.sampling.local_resolution
    inv = cfg.invariance
    seeds = iter(range(seed + 10, seed + 100))

    def crops(count, size):
        return [random_images(batch, 3, size, size, seed=next(seeds)) for _ in range(count)]

    return PairBatch(
        src=random_images(batch, 3, res, res, seed=seed),
        tgt=random_images(batch, 3, res, res, seed=seed + 1),
        global_crops=(crops(inv.num_global, res), crops(inv.num_global, res)),
        local_crops=(crops(inv.num_local, local), crops(inv.num_local, local)),
    )
