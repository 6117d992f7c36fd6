"""Domain types shared across the attack pipeline.

Coordinates are in the image frame: origin top-left, x to the right, y down.
Images and patches are ``H x W x 3`` float tensors with values in ``[0, 1]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping

import torch


class TLPatchError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(TLPatchError):
    pass


class DataError(TLPatchError):
    pass


class NumericFailure(TLPatchError):
    pass


class NothingToAttack(TLPatchError):
    pass


class IntegrityError(DataError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def shifted(self, dx: float, dy: float) -> BBox:
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def within(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class Patch:
    """Square trainable tile. ``pixels`` is mutated in place by the trainer only."""

    pixels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"patch must be H x W x 3, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"patch must be square, got {tuple(self.pixels.shape)}")

    @property
    def side_px(self) -> int:
        return int(self.pixels.shape[0])

    def clone(self) -> Patch:
        return Patch(self.pixels.detach().clone())


@dataclass
class AnnotatedImage:
    image: torch.Tensor
    gt_boxes: list[tuple[BBox, int]]
    image_id: str

    def __post_init__(self):
        h, w = self.size_hw
        for box, _ in self.gt_boxes:
            if not box.within(w, h):
                raise ValueError(f"{self.image_id}: box {box.as_tuple()} outside {w}x{h} image")

    @property
    def size_hw(self) -> tuple[int, int]:
        return int(self.image.shape[0]), int(self.image.shape[1])


@dataclass(frozen=True)
class TargetClassMapping:
    """Partial map from attacked class to adversarial label; identity elsewhere."""

    mapping: Mapping[int, int] = field(default_factory=dict)

    def __call__(self, class_id: int) -> int:
        return self.mapping.get(class_id, class_id)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.mapping

    @property
    def domain(self) -> frozenset[int]:
        return frozenset(self.mapping)

    def validate(self, class_ids) -> None:
        known = set(class_ids)
        bad = (set(self.mapping) | set(self.mapping.values())) - known
        if bad:
            raise ConfigError(f"mapping references unknown classes {sorted(bad)}")


def apply_mapping(m: TargetClassMapping, y: Detection) -> Detection:
    return dataclasses.replace(y, class_id=m(y.class_id))


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _check_range(name: str, rng: tuple[float, float]) -> None:
    if rng[0] > rng[1]:
        raise ConfigError(f"{name}: lower bound {rng[0]} exceeds upper bound {rng[1]}")


@dataclass(frozen=True)
class EotRanges:
    rot_xy_deg: tuple[float, float] = (-5.0, 5.0)
    rot_z_deg: tuple[float, float] = (-10.0, 10.0)
    brightness: tuple[float, float] = (0.4, 1.6)
    translate_pad_px: float = 10.0
    enabled: bool = False

    def __post_init__(self):
        for name in ("rot_xy_deg", "rot_z_deg", "brightness"):
            _check_range(name, getattr(self, name))
        if self.translate_pad_px < 0:
            raise ConfigError("translate_pad_px must be >= 0")


SUPPRESS_CHANNELS = ("green", "red")


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.8
    delta: float = 0.0
    pgd_steps: int = 10
    learning_rate: float = 0.05
    scale_range: tuple[float, float] = (2.0, 3.0)
    eot: EotRanges = field(default_factory=EotRanges)
    seed: int = 0
    suppress_channel: str = "green"
    # ablation / interpretation switches
    suppress_mode: str = "dominance"
    step_rule: str = "adam"
    reset_moments_per_box: bool = False
    epochs: int = 1
    max_updates: int | None = None
    eval_scale: float = 2.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "learning_rate", "eval_scale"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        for name in ("alpha", "beta", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.pgd_steps < 1:
            raise ConfigError("pgd_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        _check_range("scale_range", self.scale_range)
        if self.scale_range[0] <= 0:
            raise ConfigError("scale_range must be positive")
        if self.suppress_channel not in SUPPRESS_CHANNELS:
            raise ConfigError(f"suppress_channel must be one of {SUPPRESS_CHANNELS}")
        if self.suppress_mode not in ("dominance", "channel"):
            raise ConfigError("suppress_mode must be 'dominance' or 'channel'")
        if self.step_rule not in ("adam", "sign"):
            raise ConfigError("step_rule must be 'adam' or 'sign'")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> AttackConfig:
        d = dict(d)
        eot = d.pop("eot", None)
        if isinstance(eot, Mapping):
            eot = EotRanges(**{k: tuple(v) if isinstance(v, list) else v for k, v in eot.items()})
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown AttackConfig keys: {sorted(unknown)}")
        if eot is not None:
            d["eot"] = eot
        return cls(**d)


# Digital dataset setting uses only the classification and TV terms; the
# physical setting adds localization and green suppression plus EOT.
PROFILES: dict[str, dict] = {
    "digital": dict(alpha=1.0, beta=0.0, gamma=0.8, delta=0.0, eot=EotRanges(enabled=False)),
    "physical": dict(alpha=1.0, beta=2.0, gamma=5.0, delta=0.0002, eot=EotRanges(enabled=True)),
}


def profile_config(name: str, **overrides) -> AttackConfig:
    try:
        base = dict(PROFILES[name])
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    base.update(overrides)
    return AttackConfig(**base)
