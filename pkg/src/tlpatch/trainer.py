"""Universal patch optimization: one PGD burst per relevant ground-truth box."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import compositor, losses
from .core import (AnnotatedImage, AttackConfig, NothingToAttack, NumericFailure, Patch,
                   TargetClassMapping)
from .detector import DetectorAdapter
from .losses import LossBreakdown

log = logging.getLogger(__name__)


def init_patch(side_px: int, mode: str = "gray", rng: np.random.Generator | None = None,
               dtype=torch.float32) -> Patch:
    if side_px < 1:
        raise ValueError(f"side_px must be >= 1, got {side_px}")
    if mode == "gray":
        pixels = torch.full((side_px, side_px, 3), 0.5, dtype=dtype)
    elif mode == "uniform_random":
        rng = rng if rng is not None else np.random.default_rng()
        pixels = torch.from_numpy(rng.random((side_px, side_px, 3))).to(dtype)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return Patch(pixels)


class PatchOptimizer:
    """Adam (or sign-gradient) step on patch pixels followed by projection onto [0, 1]."""

    def __init__(self, pixels: torch.Tensor, lr: float, rule: str = "adam"):
        self.pixels = pixels.requires_grad_(True)
        self.lr = lr
        self.rule = rule
        self._adam = torch.optim.Adam([self.pixels], lr=lr) if rule == "adam" else None

    def reset(self) -> None:
        if self._adam is not None:
            self._adam = torch.optim.Adam([self.pixels], lr=self.lr)

    @property
    def moments(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        state = self._adam.state.get(self.pixels) if self._adam is not None else None
        if not state:
            return None
        return state["exp_avg"], state["exp_avg_sq"]

    def step(self, loss: torch.Tensor) -> None:
        self.pixels.grad = None
        if loss.requires_grad:
            loss.backward()
        if self.pixels.grad is None:
            self.pixels.grad = torch.zeros_like(self.pixels)
        if self._adam is not None:
            self._adam.step()
        else:
            with torch.no_grad():
                self.pixels -= self.lr * self.pixels.grad.sign()
        with torch.no_grad():
            self.pixels.clamp_(0.0, 1.0)


@dataclass
class StepRecord:
    step: int
    epoch: int
    image_id: str
    box_index: int
    scale_factor: float
    losses: LossBreakdown

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "epoch": self.epoch, "image_id": self.image_id,
                           "box_index": self.box_index, "scale_factor": self.scale_factor,
                           **self.losses.as_dict()})


@dataclass
class TrainState:
    patch: Patch
    optimizer: PatchOptimizer
    rng: np.random.Generator
    step_count: int = 0
    loss_history: list[StepRecord] = field(default_factory=list)
    updates_per_box: dict[tuple[str, int], int] = field(default_factory=dict)
    skipped_boxes: list[tuple[str, int]] = field(default_factory=list)


@dataclass
class TrainResult:
    patch: Patch
    loss_history: list[StepRecord]
    updates_per_box: dict[tuple[str, int], int]
    skipped_boxes: list[tuple[str, int]]

    def __iter__(self):
        return iter((self.patch, self.loss_history))


def relevant_boxes(dataset: Sequence[AnnotatedImage], m: TargetClassMapping):
    for sample in dataset:
        for k, (box, class_id) in enumerate(sample.gt_boxes):
            if class_id in m:
                yield sample, k, box, class_id


def _patch_objective(pixels, image, placement, t, box, target_class, adapter, cfg):
    patch = Patch(pixels)
    composite = compositor.apply(patch, image, placement, t)
    cls, bbox = adapter.attack_losses(composite, [(box, target_class)])
    tv = losses.total_variation(pixels)
    sup = losses.color_suppression(pixels, cfg.suppress_channel, cfg.suppress_mode)
    return losses.compose(cls, bbox, tv, sup, cfg)


def train(
    dataset: Sequence[AnnotatedImage],
    adapter: DetectorAdapter,
    m: TargetClassMapping,
    cfg: AttackConfig,
    *,
    patch: Patch | None = None,
    init_side: int = 50,
    init_mode: str = "gray",
    log_path: str | Path | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Optimize one universal patch over ``dataset``.

    For every relevant box (class in the mapping's domain) the patch is placed
    under the box at a scale drawn from ``cfg.scale_range`` and updated for
    ``cfg.pgd_steps`` steps, each with a freshly sampled EOT transform.
    Deterministic given ``cfg.seed``.
    """
    if not dataset:
        raise NothingToAttack("empty dataset")
    if not any(True for _ in relevant_boxes(dataset, m)):
        raise NothingToAttack("nothing to attack: no ground-truth box has a class in the mapping's domain")

    rng = np.random.default_rng(cfg.seed)
    patch = init_patch(init_side, init_mode, rng) if patch is None else patch
    state = TrainState(patch=patch, optimizer=PatchOptimizer(patch.pixels, cfg.learning_rate, cfg.step_rule), rng=rng)
    log_file = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            for sample, k, box, class_id in relevant_boxes(dataset, m):
                if cfg.max_updates is not None and state.step_count >= cfg.max_updates:
                    break
                h, w = sample.size_hw
                scale = compositor.sample_scale(cfg.scale_range, rng)
                placement = compositor.placement_for(box, (w, h), scale)
                if placement is None:
                    state.skipped_boxes.append((sample.image_id, k))
                    continue
                if cfg.reset_moments_per_box:
                    state.optimizer.reset()
                image = sample.image.to(patch.pixels.dtype)
                for _ in range(cfg.pgd_steps):
                    if cfg.max_updates is not None and state.step_count >= cfg.max_updates:
                        break
                    t = compositor.sample_transform(cfg.eot, rng)
                    total, breakdown = _patch_objective(state.optimizer.pixels, image, placement, t,
                                                        box, m(class_id), adapter, cfg)
                    if not math.isfinite(breakdown.total):
                        raise NumericFailure(
                            f"non-finite loss at step {state.step_count} "
                            f"(image {sample.image_id}, box {k}): {breakdown}")
                    state.optimizer.step(total)
                    record = StepRecord(state.step_count, epoch, sample.image_id, k, scale, breakdown)
                    state.loss_history.append(record)
                    state.step_count += 1
                    key = (sample.image_id, k)
                    state.updates_per_box[key] = state.updates_per_box.get(key, 0) + 1
                    if log_file is not None:
                        log_file.write(record.to_json() + "\n")
                    if on_step is not None:
                        on_step(record)
    finally:
        if log_file is not None:
            log_file.close()
    patch.pixels.requires_grad_(False)
    log.info("trained %d steps over %d boxes (%d skipped)", state.step_count,
             len(state.updates_per_box), len(state.skipped_boxes))
    return TrainResult(patch, state.loss_history, state.updates_per_box, state.skipped_boxes)
