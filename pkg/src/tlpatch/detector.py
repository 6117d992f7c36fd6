"""Detector adapter contract and the built-in grid surrogate detector."""

from __future__ import annotations

import abc
import math
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .core import BBox, ConfigError, Detection, iou

Target = tuple[BBox, int]


class DetectorAdapter(abc.ABC):
    """What the trainer and evaluator need from a traffic-light detector.

    ``detect`` returns final detections (after the adapter's own confidence
    threshold and NMS). ``attack_losses`` returns differentiable
    ``(cls, bbox)`` scalars for the given targets.
    """

    class_map: dict[int, str]

    @abc.abstractmethod
    def detect(self, image: torch.Tensor) -> list[Detection]:
        ...

    @abc.abstractmethod
    def attack_losses(self, image: torch.Tensor, targets: Sequence[Target]) -> tuple[torch.Tensor, torch.Tensor]:
        ...


def _check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {tuple(image.shape)}")
    lo, hi = float(image.min()), float(image.max())
    if lo < 0.0 or hi > 1.0 or math.isnan(lo) or math.isnan(hi):
        raise ValueError(f"image values must lie in [0, 1], got [{lo}, {hi}]")


class ContextBlobDetector(DetectorAdapter):
    """Grid detector scoring red/green dominance per cell.

    Each cell is a candidate box. Its objectness comes from the brighter of its
    mean red and mean green; its class logits from the red/green difference of
    the cell plus ``context_weight`` times that of the cell directly below.
    The below-cell term is what a patch under the light can exploit.
    """

    RED, GREEN = 0, 1

    def __init__(self, cell_size: int = 32, objectness_gain: float = 12.0,
                 objectness_threshold: float = 0.15, context_weight: float = 0.6,
                 conf_threshold: float = 0.5):
        if cell_size < 1:
            raise ConfigError("cell_size must be >= 1")
        self.cell_size = cell_size
        self.objectness_gain = objectness_gain
        self.objectness_threshold = objectness_threshold
        self.context_weight = context_weight
        self.conf_threshold = conf_threshold
        self.class_map = {self.RED: "red", self.GREEN: "green"}

    def cell_features(self, image: torch.Tensor) -> torch.Tensor:
        """``rows x cols x 2`` mean (R, G) per cell; edge cells average only real pixels."""
        h, w = image.shape[:2]
        c = self.cell_size
        rows, cols = -(-h // c), -(-w // c)
        rg = image[..., :2].permute(2, 0, 1)
        rg = F.pad(rg, (0, cols * c - w, 0, rows * c - h))
        sums = rg.reshape(2, rows, c, cols, c).sum(dim=(2, 4))
        ys = torch.tensor([min(c, h - i * c) for i in range(rows)], dtype=image.dtype)
        xs = torch.tensor([min(c, w - j * c) for j in range(cols)], dtype=image.dtype)
        return (sums / (ys[:, None] * xs[None, :])).permute(1, 2, 0)

    def scores(self, image: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-cell objectness ``rows x cols`` and class logits ``rows x cols x 2``."""
        f = self.cell_features(image)
        objectness = torch.sigmoid(self.objectness_gain * (f.max(dim=-1).values - self.objectness_threshold))
        diff = f[..., 0] - f[..., 1]
        below = torch.zeros_like(diff)
        below[:-1] = diff[1:]
        red = diff + self.context_weight * below
        return objectness, torch.stack([red, -red], dim=-1)

    def cell_rect(self, row: int, col: int, image_hw: tuple[int, int]) -> BBox:
        h, w = image_hw
        c = self.cell_size
        return BBox(col * c, row * c, min((col + 1) * c, w), min((row + 1) * c, h))

    def cell_of(self, x: float, y: float, image_hw: tuple[int, int]) -> tuple[int, int]:
        h, w = image_hw
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"point ({x}, {y}) outside {w}x{h} image")
        return int(y // self.cell_size), int(x // self.cell_size)

    def detect(self, image: torch.Tensor) -> list[Detection]:
        _check_image(image)
        with torch.no_grad():
            objectness, logits = self.scores(image)
            probs = torch.softmax(logits, dim=-1)
            best, cls = probs.max(dim=-1)
            conf = objectness * best
        hw = (int(image.shape[0]), int(image.shape[1]))
        out = []
        for i, j in (conf >= self.conf_threshold).nonzero().tolist():
            out.append(Detection(self.cell_rect(i, j, hw), float(conf[i, j]), int(cls[i, j])))
        return out

    def attack_losses(self, image: torch.Tensor, targets: Sequence[Target]) -> tuple[torch.Tensor, torch.Tensor]:
        if not targets:
            raise ValueError("attack_losses needs at least one target")
        hw = (int(image.shape[0]), int(image.shape[1]))
        _, logits = self.scores(image)
        logp = torch.log_softmax(logits, dim=-1)
        cls_terms, box_terms = [], []
        for box, class_id in targets:
            i, j = self.cell_of(*box.center, hw)
            cls_terms.append(-logp[i, j, class_id])
            cell = self.cell_rect(i, j, hw)
            err = [(a - b) / self.cell_size for a, b in zip(cell.as_tuple(), box.as_tuple())]
            box_terms.append(sum(e * e for e in err) / 4)
        cls = torch.stack(cls_terms).mean()
        bbox = torch.tensor(sum(box_terms) / len(box_terms), dtype=logits.dtype)
        return cls, bbox


def match_predictions(pred_boxes: Sequence[BBox], target: BBox, threshold: float = 0.5,
                      fallback: Callable[[BBox], int] | None = None) -> int | None:
    """Index of the prediction with highest IoU to ``target`` if it reaches ``threshold``.

    External adapters use this to pick the prediction whose losses are
    attacked. When nothing reaches the threshold, ``fallback(target)`` (e.g.
    the anchor containing the target centre) decides, or None is returned.
    """
    best, best_iou = None, -1.0
    for k, box in enumerate(pred_boxes):
        v = iou(box, target)
        if v > best_iou:
            best, best_iou = k, v
    if best is not None and best_iou >= threshold:
        return best
    return fallback(target) if fallback is not None else None


_ADAPTERS: dict[str, Callable[..., DetectorAdapter]] = {"context_blob": ContextBlobDetector}


def register_adapter(name: str, factory: Callable[..., DetectorAdapter]) -> None:
    _ADAPTERS[name] = factory


def make_adapter(name: str, **options) -> DetectorAdapter:
    """Instantiate an adapter by name; ``options`` (weights paths etc.) pass through untouched."""
    try:
        factory = _ADAPTERS[name]
    except KeyError:
        raise ConfigError(f"unknown detector {name!r}; known: {sorted(_ADAPTERS)}") from None
    return factory(**options)
