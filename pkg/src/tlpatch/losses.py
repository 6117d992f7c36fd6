"""Detector-independent patch losses and the weighted attack objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import AttackConfig, Patch

TV_EPS = 1e-8
BLUR_SIZE = 5
BLUR_SIGMA = 1.0

_CHANNEL = {"red": 0, "green": 1}


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    bbox: float
    tv: float
    color_sup: float
    total: float

    def as_dict(self) -> dict:
        return {"cls": self.cls, "bbox": self.bbox, "tv": self.tv,
                "color_sup": self.color_sup, "total": self.total}


def _pixels(p) -> torch.Tensor:
    t = p.pixels if isinstance(p, Patch) else p
    return t.unsqueeze(-1) if t.ndim == 2 else t


def tv_map(p, eps: float = TV_EPS) -> torch.Tensor:
    """Per-pixel, per-channel ``sqrt(dh^2 + dv^2 + eps)`` with forward differences."""
    x = _pixels(p)
    dh = torch.zeros_like(x)
    dv = torch.zeros_like(x)
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    dv[:-1] = x[1:] - x[:-1]
    return torch.sqrt(dh * dh + dv * dv + eps)


def total_variation(p, eps: float = TV_EPS) -> torch.Tensor:
    """Mean isotropic total variation. Accepts a Patch, ``H x W`` or ``H x W x C`` tensor.

    Pass ``eps=0`` for an exact zero on constant input (not differentiable there).
    """
    return tv_map(p, eps).mean()


def gaussian_kernel(size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = size // 2
    g = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)]
    k = torch.tensor([[a * b for b in g] for a in g], dtype=torch.float64)
    return (k / k.sum()).to(dtype)


def reflect_index(n: int, pad: int) -> torch.Tensor:
    """Indices of a reflect-padded axis (edge not repeated), valid for any ``pad``."""
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.abs() % period
    return torch.where(idx >= n, period - idx, idx)


def gaussian_blur(img: torch.Tensor, size: int = BLUR_SIZE, sigma: float = BLUR_SIGMA) -> torch.Tensor:
    """Blur an ``H x W`` map with reflect padding.

    Taps are accumulated in row-major kernel order so the result is reproducible
    term by term.
    """
    h, w = img.shape
    r = size // 2
    k = gaussian_kernel(size, sigma, img.dtype)
    padded = img[reflect_index(h, r)][:, reflect_index(w, r)]
    out = torch.zeros_like(img)
    for a in range(size):
        for b in range(size):
            out = out + k[a, b] * padded[a:a + h, b:b + w]
    return out


def dominance_map(p, channel: str = "green", mode: str = "dominance") -> torch.Tensor:
    x = _pixels(p)
    c = _CHANNEL[channel]
    if mode == "channel":
        return x[..., c]
    others = [i for i in range(3) if i != c]
    return torch.relu(x[..., c] - torch.maximum(x[..., others[0]], x[..., others[1]]))


def color_suppression(p, channel: str = "green", mode: str = "dominance") -> torch.Tensor:
    """Mean of the Gaussian-blurred channel-dominance map.

    ``mode="dominance"`` scores ``relu(C - max(others))``; ``mode="channel"``
    blurs the raw channel instead.
    """
    return gaussian_blur(dominance_map(p, channel, mode)).mean()


def _f(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def compose(cls, bbox, tv, sup, cfg: AttackConfig) -> tuple[torch.Tensor | float, LossBreakdown]:
    """Weighted attack objective and a float breakdown for logging."""
    total = cfg.alpha * cls + cfg.beta * bbox + cfg.gamma * tv + cfg.delta * sup
    breakdown = LossBreakdown(
        cls=_f(cls), bbox=_f(bbox), tv=_f(tv), color_sup=_f(sup), total=_f(total)
    )
    return total, breakdown
