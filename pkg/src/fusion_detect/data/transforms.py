"""Image I/O, resizing and brightness augmentation for 8-bit RGB images."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ContractError

DEFAULT_INPUT_DIMS = (224, 224, 3)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(image: np.ndarray, path) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path, format=fmt)


def resize_image(image: np.ndarray, target_hw: tuple[int, int], boxes=None):
    """Bilinear resize without preserving aspect ratio.

    Returns ``(resized, scaled_boxes)``; boxes are ``(n, 4)`` xywh scaled by
    the same per-axis factors.
    """
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th <= 0 or tw <= 0:
        raise ContractError(f"resize target must be positive, got {target_hw}")
    h, w = image.shape[:2]
    boxes = np.zeros((0, 4)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if (h, w) == (th, tw):
        return image.copy(), boxes.copy()
    resized = np.asarray(Image.fromarray(image).resize((tw, th), Image.BILINEAR))
    scale = np.array([tw / w, th / h, tw / w, th / h])
    return resized, boxes * scale


@dataclass(frozen=True)
class AugmentationConfig:
    darken_range: tuple[float, float] = (0.5, 1.0)
    brighten_range: tuple[float, float] = (1.0, 1.5)
    probability: float = 0.5  # chance of darkening rather than brightening

    def __post_init__(self):
        for lo, hi in (self.darken_range, self.brighten_range):
            if not 0 < lo <= hi:
                raise ContractError(f"brightness range must be positive and ordered, got {(lo, hi)}")
        if not 0 <= self.probability <= 1:
            raise ContractError(f"probability must be in [0, 1], got {self.probability}")


def apply_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    out = np.rint(image.astype(np.float64) * factor)
    return np.clip(out, 0, 255).astype(np.uint8)


def brightness_factor(cfg: AugmentationConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.darken_range if rng.random() < cfg.probability else cfg.brighten_range
    return float(rng.uniform(lo, hi))


def augment_brightness(image: np.ndarray, cfg: AugmentationConfig = AugmentationConfig(),
                       seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Scale the whole image by one random factor; boxes are unaffected."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    return apply_brightness(image, brightness_factor(cfg, rng))


def to_network_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``(N, H, W, 3)`` to the float range the networks are trained on."""
    return (np.asarray(images, dtype=dtype) / 255.0 - 0.5).astype(dtype)


def random_flip(image: np.ndarray, boxes: np.ndarray, rng: np.random.Generator):
    """Independent horizontal and vertical flips, each with probability 1/2."""
    h, w = image.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if rng.random() < 0.5:
        image = image[:, ::-1]
        boxes[:, 0] = w - boxes[:, 0] - boxes[:, 2]
    if rng.random() < 0.5:
        image = image[::-1]
        boxes[:, 1] = h - boxes[:, 1] - boxes[:, 3]
    return np.ascontiguousarray(image), boxes


def random_translate(image: np.ndarray, boxes: np.ndarray, max_shift: int, rng: np.random.Generator,
                     labels=None, min_visible: float = 0.7):
    """Shift the content by up to ``max_shift`` px per axis, filling with edge
    pixels.  Boxes less than ``min_visible`` inside the frame are dropped,
    the rest clipped.  Returns ``(image, boxes, labels)``."""
    h, w = image.shape[:2]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=np.int64) if labels is None else np.asarray(labels)
    if max_shift <= 0:
        return image, boxes.copy(), labels.copy()
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    padded = np.pad(image, ((max_shift, max_shift), (max_shift, max_shift), (0, 0)), mode="edge")
    out = padded[max_shift - dy:max_shift - dy + h, max_shift - dx:max_shift - dx + w]
    moved = boxes + np.array([dx, dy, 0, 0])
    c = np.concatenate([moved[:, :2], moved[:, :2] + moved[:, 2:]], axis=1)
    c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, w)
    c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, h)
    clipped = np.concatenate([c[:, :2], c[:, 2:] - c[:, :2]], axis=1)
    visible = (clipped[:, 2] * clipped[:, 3]) / (boxes[:, 2] * boxes[:, 3])
    keep = visible >= min_visible
    return np.ascontiguousarray(out), clipped[keep], labels[keep]
