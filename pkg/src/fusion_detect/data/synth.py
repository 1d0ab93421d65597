"""Seeded synthetic road scenes.

Each scene is a noisy gray road with dashed lane markers and soft shadow
quads (neither is labelled) plus one or more filled, vehicle-like
rectangles whose exact extents are the ground-truth boxes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ContractError, GenerationError
from .manifest import DatasetManifest, LabeledImage, save_manifest
from .transforms import write_image

PALETTE = np.array([
    (200, 30, 30), (30, 60, 200), (240, 240, 240), (20, 20, 20), (230, 200, 40),
    (40, 160, 60), (150, 40, 170), (230, 120, 30),
], dtype=np.float64)


@dataclass(frozen=True)
class SynthConfig:
    image_dims: tuple[int, int] = (64, 64)
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 30
    max_aspect: float = 1.8
    shadows: tuple[int, int] = (0, 2)
    lanes: tuple[int, int] = (1, 2)
    noise_std: float = 4.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractError(f"need 1 <= min_objects <= max_objects, got "
                                f"{self.min_objects}, {self.max_objects}")
        if not 1 <= self.min_size <= self.max_size:
            raise ContractError("need 1 <= min_size <= max_size")
        if self.max_size > min(self.image_dims):
            raise ContractError("objects cannot be larger than the image")


def _overlaps(box, others, gap: int) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x < ox + ow + gap and ox < x + w + gap and y < oy + oh + gap and oy < y + h + gap:
            return True
    return False


def _place_targets(cfg: SynthConfig, rng: np.random.Generator, count: int) -> list[tuple[int, ...]]:
    h, w = cfg.image_dims
    for _layout in range(cfg.max_retries):
        boxes: list[tuple[int, ...]] = []
        for _ in range(count):
            for _attempt in range(50):
                bw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
                aspect = np.exp(rng.uniform(-np.log(cfg.max_aspect), np.log(cfg.max_aspect)))
                bh = int(np.clip(round(bw / aspect), cfg.min_size, cfg.max_size))
                bx = int(rng.integers(0, w - bw + 1))
                by = int(rng.integers(0, h - bh + 1))
                if not _overlaps((bx, by, bw, bh), boxes, gap=2):
                    boxes.append((bx, by, bw, bh))
                    break
            else:
                break
        if len(boxes) == count:
            return boxes
    raise GenerationError(f"could not place {count} objects in a {h}x{w} scene "
                          f"after {cfg.max_retries} layouts")


def render_scene(cfg: SynthConfig, index: int):
    """Render scene ``index``; returns ``(uint8 image, boxes (n, 4))``."""
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.image_dims
    base = rng.uniform(80, 140)
    grad = np.linspace(-10, 10, h)[:, None] * rng.uniform(-1, 1)
    road = np.broadcast_to(base + grad, (h, w))
    canvas = Image.fromarray(np.repeat(np.clip(road, 0, 255)[..., None], 3, axis=2).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    for _ in range(int(rng.integers(cfg.lanes[0], cfg.lanes[1] + 1))):
        color = (235, 235, 235) if rng.random() < 0.6 else (225, 200, 60)
        x0, x1 = rng.uniform(0, w, size=2)
        width = int(rng.integers(1, 3))
        dash = rng.uniform(4, 10)
        steps = int(h // dash)
        for s in range(0, steps, 2):
            t0, t1 = s / steps, (s + 1) / steps
            draw.line([(x0 + (x1 - x0) * t0, h * t0), (x0 + (x1 - x0) * t1, h * t1)],
                      fill=color, width=width)

    for _ in range(int(rng.integers(cfg.shadows[0], cfg.shadows[1] + 1))):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        sw, sh = rng.uniform(cfg.min_size, cfg.max_size, size=2)
        skew = rng.uniform(-0.4, 0.4) * sw
        quad = [(cx - sw / 2, cy - sh / 2), (cx + sw / 2, cy - sh / 2),
                (cx + sw / 2 + skew, cy + sh / 2), (cx - sw / 2 + skew, cy + sh / 2)]
        shade = int(np.clip(base - rng.uniform(15, 35), 0, 255))
        draw.polygon(quad, fill=(shade, shade, shade))

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = _place_targets(cfg, rng, count)
    img = np.asarray(canvas, dtype=np.float64).copy()
    for bx, by, bw, bh in boxes:
        color = PALETTE[rng.integers(len(PALETTE))] + rng.uniform(-20, 20, size=3)
        img[by:by + bh, bx:bx + bw] = color
        # darker outline and a lighter windscreen band
        edge = color * 0.55
        img[by, bx:bx + bw] = edge
        img[by + bh - 1, bx:bx + bw] = edge
        img[by:by + bh, bx] = edge
        img[by:by + bh, bx + bw - 1] = edge
        band_y = by + max(1, bh // 4)
        band_h = max(1, bh // 6)
        img[band_y:band_y + band_h, bx + 2:bx + bw - 2] = 0.5 * color + 0.5 * np.array([170, 200, 220])

    img += rng.normal(0, cfg.noise_std, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def synth_scenes(cfg: SynthConfig, n: int):
    """In-memory variant: ``(images (n, H, W, 3), list of box arrays)``."""
    if n < 1:
        raise ContractError(f"n must be at least 1, got {n}")
    images, boxes = [], []
    for i in range(n):
        im, bx = render_scene(cfg, i)
        images.append(im)
        boxes.append(bx)
    return np.stack(images), boxes


def synth_generate(cfg: SynthConfig, n: int, out_dir) -> DatasetManifest:
    """Write ``n`` scenes as PNGs plus ``manifest.jsonl`` under ``out_dir``."""
    if n < 1:
        raise ContractError(f"n must be at least 1, got {n}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        image, boxes = render_scene(cfg, i)
        rel = f"images/scene_{i:05d}.png"
        write_image(image, out_dir / rel)
        records.append(LabeledImage(rel, boxes, ["vehicle"] * len(boxes)))
    manifest = DatasetManifest(records, ("vehicle",), out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
