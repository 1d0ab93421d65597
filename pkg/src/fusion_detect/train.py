"""SGDM training loop.

Batch composition and all per-step randomness are pure functions of
``(seed, iteration)``, so a run resumed from a checkpoint at an iteration
boundary follows the same trajectory as an uninterrupted one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data.transforms import (AugmentationConfig, apply_brightness, brightness_factor, random_flip,
                              random_translate, to_network_input)
from .detection.losses import LossBreakdown
from .detection.model import DetectorModel, SamplingConfig
from .errors import NumericError
from .nn import SGDM

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 20
    iterations: int = 1000
    log_every: int = 20
    checkpoint_every: int = 0
    augment: bool = True
    # geometric augmentation (off in the full profile)
    flip: bool = False
    translate: int = 0
    # element-wise gradient clip; 0 disables
    grad_clip: float = 0.0
    # step schedule: the rate is multiplied by lr_decay_factor at each listed iteration
    lr_decay_at: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    sampling: SamplingConfig = SamplingConfig()
    augmentation: AugmentationConfig = AugmentationConfig()


@dataclass
class TrainingSet:
    images: np.ndarray                     # uint8 (N, H, W, 3), already at model input size
    boxes: list[np.ndarray]
    classes: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.images)


def batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Sample indices for a (0-based) iteration: consecutive slices of a
    per-epoch seeded permutation, wrapping across epochs."""
    pos = iteration * batch_size + np.arange(batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = np.random.default_rng([seed, 0, int(e)]).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    """Rate for a 0-based iteration; depends on nothing else, so resumed runs agree."""
    drops = sum(1 for t in cfg.lr_decay_at if iteration >= t)
    return cfg.learning_rate * cfg.lr_decay_factor ** drops


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, iteration])


@dataclass
class TrainState:
    iteration: int = 0
    optimizer: SGDM = field(default_factory=SGDM)
    history: list[dict] = field(default_factory=list)


def train_step(model: DetectorModel, state: TrainState, data: TrainingSet, cfg: TrainConfig,
               seed: int) -> LossBreakdown:
    t = state.iteration
    idx = batch_indices(len(data), cfg.batch_size, t, seed)
    rng = step_rng(seed, t)
    imgs, boxes, classes = [], [], []
    for i in idx:
        im, bx, cl = data.images[i], data.boxes[i], data.classes[i]
        if cfg.flip:
            im, bx = random_flip(im, bx, rng)
        if cfg.translate:
            im, bx, cl = random_translate(im, bx, cfg.translate, rng, cl)
        if cfg.augment:
            im = apply_brightness(im, brightness_factor(cfg.augmentation, rng))
        imgs.append(im)
        boxes.append(bx)
        classes.append(cl)
    x = to_network_input(np.stack(imgs), next(iter(model.params.values())).dtype)
    lb, grads, _ = model.loss_and_grads(model.params, x, gt_boxes=boxes, gt_classes=classes,
                                        rng=rng, cfg=cfg.sampling)
    if not np.isfinite(lb.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericError(f"non-finite loss at iteration {t + 1} (seed {seed}, "
                           f"batch indices {idx.tolist()}): {lb.to_dict()}")
    if cfg.grad_clip > 0:
        grads = {k: np.clip(g, -cfg.grad_clip, cfg.grad_clip) for k, g in grads.items()}
    state.optimizer.learning_rate = learning_rate_at(cfg, t)
    state.optimizer.step(model.params, grads)
    state.iteration += 1
    return lb


def train(model: DetectorModel, data: TrainingSet, cfg: TrainConfig, seed: int,
          state: TrainState | None = None,
          on_log: Callable[[dict], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run until ``cfg.iterations`` total iterations have been done."""
    if state is None:
        state = TrainState(optimizer=SGDM(cfg.learning_rate, cfg.momentum))
    while state.iteration < cfg.iterations:
        lb = train_step(model, state, data, cfg, seed)
        t = state.iteration
        if t == 1 or t % cfg.log_every == 0 or t == cfg.iterations:
            entry = {"iteration": t, **{k: float(v) for k, v in lb.to_dict().items()}}
            state.history.append(entry)
            log.info("iter %d total %.4f rpn_cls %.4f rpn_reg %.4f rcnn_cls %.4f rcnn_reg %.4f",
                     t, lb.total, lb.rpn_cls, lb.rpn_reg, lb.rcnn_cls, lb.rcnn_reg)
            if on_log:
                on_log(entry)
        if on_checkpoint and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state
