"""Glue between data, model, training and evaluation, shared by the CLI and
the acceptance tests."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data.manifest import DatasetManifest, load_manifest, split_dataset
from .data.synth import synth_scenes
from .data.transforms import read_image, resize_image, to_network_input
from .detection.anchors import AnchorSet, estimate_anchors
from .detection.model import DetectConfig, Detection, DetectorModel
from .errors import ValidationError
from .evaluation import MatchResult, match_detections, measure_frame_rate
from .train import TrainingSet, TrainState, train

log = logging.getLogger(__name__)

SPLITS = ("all", "train", "test")


def select_split(n: int, split: str, train_fraction: float, seed: int) -> np.ndarray:
    """Indices of ``split``; the same seeded shuffle as ``split_dataset``."""
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    if split == "all":
        return np.arange(n)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(order[:n_train]) if split == "train" else np.sort(order[n_train:])


def manifest_split(manifest: DatasetManifest, split: str, cfg: RunConfig) -> DatasetManifest:
    if split == "all":
        return manifest
    train_part, test_part = split_dataset(manifest, cfg.data.train_fraction, cfg.seed)
    return train_part if split == "train" else test_part


def load_images(manifest: DatasetManifest, input_hw: tuple[int, int]) -> TrainingSet:
    """Read every image, resizing it (and its boxes) to the network input."""
    images, boxes, classes = [], [], []
    for rec in manifest.records:
        path = manifest.image_path(rec)
        try:
            img = read_image(path)
        except (FileNotFoundError, OSError) as exc:
            raise ValidationError(f"cannot read image {path}: {exc}") from None
        img, bx = resize_image(img, input_hw, rec.boxes)
        images.append(img)
        boxes.append(bx)
        classes.append(manifest.class_ids(rec))
    h, w = input_hw
    stacked = np.stack(images) if images else np.zeros((0, h, w, 3), np.uint8)
    return TrainingSet(stacked, boxes, classes)


def synth_dataset(cfg: RunConfig, n: int | None = None) -> TrainingSet:
    """In-memory synthetic scenes, resized to the network input."""
    n = cfg.data.synth.scenes if n is None else n
    imgs, boxes = synth_scenes(cfg.synth_config(), n)
    hw = tuple(cfg.model.input_dims[:2])
    out_imgs, out_boxes = [], []
    for im, bx in zip(imgs, boxes):
        im, bx = resize_image(im, hw, bx)
        out_imgs.append(im)
        out_boxes.append(bx)
    return TrainingSet(np.stack(out_imgs), out_boxes, [np.ones(len(b), np.int64) for b in out_boxes])


def subset(data: TrainingSet, idx) -> TrainingSet:
    idx = list(idx)
    return TrainingSet(data.images[idx], [data.boxes[i] for i in idx], [data.classes[i] for i in idx])


def anchors_for(cfg: RunConfig, boxes: list[np.ndarray]) -> tuple[AnchorSet, float | None]:
    """Configured anchor shapes, or k-means estimates from ``boxes``."""
    if cfg.anchors.shapes is not None:
        return AnchorSet(cfg.anchors.shapes, cfg.anchors.stride), None
    allb = np.concatenate([np.asarray(b).reshape(-1, 4) for b in boxes]) if boxes else np.zeros((0, 4))
    if len(allb) == 0:
        raise ValidationError("cannot estimate anchors: the training data has no boxes")
    return estimate_anchors(allb, cfg.anchors.k, seed=cfg.seed, stride=cfg.anchors.stride)


def build_model(cfg: RunConfig, data: TrainingSet) -> DetectorModel:
    anchors, miou = anchors_for(cfg, data.boxes)
    if miou is not None:
        log.info("estimated %d anchors, mean IoU %.4f", anchors.k, miou)
    return DetectorModel(cfg.detector_config(anchors), seed=cfg.seed)


def run_training(cfg: RunConfig, data: TrainingSet, out_dir=None, model: DetectorModel | None = None,
                 state: TrainState | None = None,
                 on_log: Callable[[dict], None] | None = None) -> tuple[DetectorModel, TrainState]:
    """Train (or continue training) and, with ``out_dir``, write checkpoints
    and the loss log there."""
    if len(data) == 0:
        raise ValidationError("no training images")
    model = model if model is not None else build_model(cfg, data)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("a" if state is not None else "w", encoding="utf-8")

    def logged(entry):
        if log_file is not None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_log:
            on_log(entry)

    def checkpointed(st):
        if out is not None:
            save_checkpoint(Checkpoint.from_training(cfg, model, st), out / f"ckpt_{st.iteration:06d}.fdck")

    try:
        state = train(model, data, cfg.train_config(), cfg.seed, state, logged, checkpointed)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(Checkpoint.from_training(cfg, model, state), out / "checkpoint.fdck")
    return model, state


def detect_images(model: DetectorModel, images: np.ndarray, cfg: DetectConfig,
                  batch: int = 16) -> list[list[Detection]]:
    """Detections for uint8 images already at the network input size."""
    dtype = next(iter(model.params.values())).dtype
    out: list[list[Detection]] = []
    for i in range(0, len(images), batch):
        out.extend(model.detect(to_network_input(images[i:i + batch], dtype), cfg))
    return out


def evaluate(model: DetectorModel, data: TrainingSet, cfg: DetectConfig, iou_threshold: float = 0.5,
             time_it: bool = True) -> tuple[MatchResult, float | None]:
    """Pooled match counts over ``data`` and (optionally) single-image fps."""
    total = MatchResult()
    for dets, gt in zip(detect_images(model, data.images, cfg), data.boxes):
        total = total + match_detections(dets, gt, iou_threshold)
    fps = None
    if time_it and len(data) >= 2:
        dtype = next(iter(model.params.values())).dtype
        fps = measure_frame_rate(lambda im: model.detect(to_network_input(im[None], dtype), cfg),
                                 data.images, warmup=1, clock=time.perf_counter)
    return total, fps


def read_manifest(path, cfg: RunConfig | None = None) -> DatasetManifest:
    names = tuple(cfg.model.class_names) if cfg is not None else None
    try:
        return load_manifest(path, names)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from None
