"""
Synthetic moving-sprite videos with exact ground truth.

Sprites translate rigidly with wrap-around over a static background. Each step
renders the current frame together with the per-pixel displacement to the next
frame and a sprite-id map (0 is background).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import SpritesConfig

SHAPES = ("square", "disk", "triangle")
# (dx, dy) per direction label
DIRECTIONS = ((1, 0), (0, 1), (-1, 0), (0, -1))


@dataclass(frozen=True)
class Sprite:
    shape: str
    color: tuple[int, int, int]
    position: tuple[float, float]  # top-left corner, pixels (x, y)
    velocity: tuple[float, float]  # pixels per frame
    size: int


@dataclass(frozen=True)
class SpriteWorld:
    canvas: int
    sprites: tuple[Sprite, ...]
    fps: float = 30.0
    texture_seed: int = 0
    texture: bool = True
    direction: int = -1  # shared direction label, -1 when mixed


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean (size, size) footprint of *shape*."""
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disk":
        c = (size - 1) / 2.0
        return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        # apex at top centre, base on the bottom row
        half = (yy + 1) / 2.0
        return np.abs(xx - (size - 1) / 2.0) <= half
    raise ValueError(f"unknown sprite shape {shape!r}")


def background(world: SpriteWorld) -> np.ndarray:
    h = w = world.canvas
    if not world.texture:
        return np.full((h, w, 3), 32, dtype=np.uint8)
    rng = np.random.default_rng(world.texture_seed)
    noise = rng.integers(0, 48, size=(h, w, 1), dtype=np.int64)
    tint = rng.integers(16, 64, size=(1, 1, 3), dtype=np.int64)
    return (noise + tint).astype(np.uint8)


def _pixel_origin(sprite: Sprite) -> tuple[int, int]:
    return int(np.floor(sprite.position[0] + 0.5)), int(np.floor(sprite.position[1] + 0.5))


def render(world: SpriteWorld) -> tuple[np.ndarray, np.ndarray]:
    """Frame (H, W, 3) uint8 and sprite-id map (H, W) int32; later sprites draw on top."""
    n = world.canvas
    frame = background(world)
    seg = np.zeros((n, n), dtype=np.int32)
    for index, sprite in enumerate(world.sprites, start=1):
        mask = shape_mask(sprite.shape, sprite.size)
        ys, xs = np.nonzero(mask)
        ox, oy = _pixel_origin(sprite)
        px = (xs + ox) % n
        py = (ys + oy) % n
        frame[py, px] = sprite.color
        seg[py, px] = index
    return frame, seg


def advance(world: SpriteWorld) -> SpriteWorld:
    """Move every sprite by its velocity, wrapping positions into the canvas."""
    n = world.canvas
    moved = tuple(
        replace(
            s,
            position=((s.position[0] + s.velocity[0]) % n, (s.position[1] + s.velocity[1]) % n),
        )
        for s in world.sprites
    )
    return replace(world, sprites=moved)


def flow_map(world: SpriteWorld, nxt: SpriteWorld, seg: np.ndarray) -> np.ndarray:
    """(H, W, 2) float32 rendered displacement (dx, dy) of each pixel into *nxt*."""
    n = world.canvas
    flow = np.zeros((n, n, 2), dtype=np.float32)
    for index, (now, after) in enumerate(zip(world.sprites, nxt.sprites), start=1):
        x0, y0 = _pixel_origin(now)
        x1, y1 = _pixel_origin(after)
        # unwrap so a step across the border is a short move
        dx = (x1 - x0 + n // 2) % n - n // 2
        dy = (y1 - y0 + n // 2) % n - n // 2
        flow[seg == index] = (dx, dy)
    return flow


def synth_step(world: SpriteWorld) -> tuple[SpriteWorld, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(next_world, frame, flow, seg)``; frame, flow and seg describe *world*."""
    frame, seg = render(world)
    nxt = advance(world)
    return nxt, frame, flow_map(world, nxt, seg), seg


def random_world(
    cfg: SpritesConfig,
    rng: np.random.Generator,
    *,
    patch_size: int = 8,
) -> SpriteWorld:
    """Sample a world from *cfg*; a shared direction is drawn once per world."""
    n = cfg.canvas
    lo, hi = cfg.size_range
    direction = int(rng.integers(len(DIRECTIONS)))
    sprites = []
    for _ in range(cfg.num_sprites):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = tuple(int(c) for c in rng.integers(96, 256, size=3))
        d = direction if cfg.shared_direction else int(rng.integers(len(DIRECTIONS)))
        if cfg.patch_aligned:
            size = patch_size
            step = max(n // patch_size, 1)
            position = (
                float(rng.integers(step) * patch_size),
                float(rng.integers(step) * patch_size),
            )
            speed: float = float(patch_size)
        else:
            size = int(rng.integers(lo, hi + 1))
            position = (float(rng.integers(n)), float(rng.integers(n)))
            if cfg.integer_velocity:
                speed = float(rng.integers(1, cfg.max_speed + 1))
            else:
                speed = float(rng.uniform(0.5, cfg.max_speed))
        dx, dy = DIRECTIONS[d]
        sprites.append(
            Sprite(shape, color, position, (dx * speed, dy * speed), size)  # type: ignore[arg-type]
        )
    return SpriteWorld(
        canvas=n,
        sprites=tuple(sprites),
        fps=cfg.fps,
        texture_seed=int(rng.integers(2**31)),
        texture=cfg.texture,
        direction=direction if cfg.shared_direction else -1,
    )


def world_state(world: SpriteWorld) -> list[dict]:
    """JSON-able per-sprite state."""
    return [
        {
            "shape": s.shape,
            "color": list(s.color),
            "position": list(s.position),
            "velocity": list(s.velocity),
            "size": s.size,
        }
        for s in world.sprites
    ]
