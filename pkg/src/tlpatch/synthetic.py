"""Synthetic traffic-light scenes with exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import AnnotatedImage, AttackConfig, BBox, iou, profile_config

RED, GREEN = 0, 1
CLASS_NAMES = {RED: "red", GREEN: "green"}


@dataclass(frozen=True)
class SceneConfig:
    """Renderer settings.

    ``grid`` snaps every light into one cell of a ``grid``-pixel lattice (the
    layout the grid surrogate detector can localize); ``None`` places lights
    anywhere.
    """

    width: int = 640
    height: int = 480
    lights_per_scene: tuple[int, int] = (1, 3)
    box_width_px: tuple[int, int] = (12, 40)
    # free placement: height = width * aspect
    aspect: tuple[float, float] = (1.6, 2.6)
    grid: int | None = None
    # grid placement: absolute heights, then rejection on IoU with the host cell
    box_height_px: tuple[int, int] = (18, 21)
    min_cell_iou: float = 0.55
    red_fraction: float = 0.5
    background: tuple[float, float] = (0.16, 0.26)
    texture_amplitude: float = 0.04
    housing_level: float = 0.14
    lamp_radius: float = 0.5
    # orange-tinted red keeps the clean red margin small enough to flip
    red_lamp: tuple[float, float, float] = (1.0, 0.4, 0.05)
    green_lamp: tuple[float, float, float] = (0.05, 1.0, 0.6)
    max_patch_scale: float = 3.0


# Grid-aligned layout used by the end-to-end benchmark with the 32 px surrogate.
BENCHMARK_SCENES = SceneConfig(grid=32, box_width_px=(28, 40))


def benchmark_attack(**overrides) -> AttackConfig:
    """Digital profile plus raw-green suppression, capped at 2000 updates.

    Dominance-style suppression is sidestepped by painting cyan (the surrogate
    reads only R and G), so the benchmark penalizes the green channel itself.
    """
    base = dict(delta=4.0, suppress_mode="channel", max_updates=2000)
    base.update(overrides)
    return profile_config("digital", **base)


def _background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(*cfg.background)
    coarse = rng.uniform(-1.0, 1.0, size=(cfg.height // 40 + 2, cfg.width // 40 + 2))
    t = torch.from_numpy(coarse)[None, None]
    smooth = torch.nn.functional.interpolate(t, size=(cfg.height, cfg.width), mode="bilinear",
                                             align_corners=False)[0, 0].numpy()
    fine = rng.uniform(-0.5, 0.5, size=(cfg.height, cfg.width))
    gray = np.clip(base + cfg.texture_amplitude * (smooth + 0.25 * fine), 0.0, 1.0)
    return np.repeat(gray[..., None], 3, axis=2)


def _draw_light(img: np.ndarray, box: tuple[int, int, int, int], class_id: int, cfg: SceneConfig) -> None:
    x0, y0, x1, y1 = box
    img[y0:y1, x0:x1] = cfg.housing_level
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    r = cfg.lamp_radius * min(x1 - x0, y1 - y0)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    disk = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    color = cfg.red_lamp if class_id == RED else cfg.green_lamp
    img[yy[disk], xx[disk]] = color


def _grid_box(cfg: SceneConfig, rng: np.random.Generator, col: int, row: int):
    c = cfg.grid
    cell = BBox(col * c, row * c, (col + 1) * c, (row + 1) * c)
    for _ in range(100):
        w = int(rng.integers(cfg.box_width_px[0], cfg.box_width_px[1] + 1))
        h = int(rng.integers(cfg.box_height_px[0], cfg.box_height_px[1] + 1))
        x0 = col * c + (c - w) // 2
        box = (x0, row * c, x0 + w, row * c + h)
        if iou(BBox(*box), cell) >= cfg.min_cell_iou:
            return box
    raise ValueError("box size ranges incompatible with min_cell_iou")


def _fits(box, cfg: SceneConfig) -> bool:
    x0, y0, x1, y1 = box
    w = x1 - x0
    side = int(np.ceil(cfg.max_patch_scale * w))
    cx = (x0 + x1) / 2
    return cx - side / 2 - 1 >= 0 and cx + side / 2 + 1 <= cfg.width and y1 + side <= cfg.height and y0 >= 0


def _layout(cfg: SceneConfig, rng: np.random.Generator, n_lights: int):
    """Boxes whose below-patch regions (at the largest scale) stay clear of other lights."""
    boxes = []
    for _ in range(200 * n_lights):
        if len(boxes) == n_lights:
            break
        if cfg.grid:
            cols, rows = cfg.width // cfg.grid, cfg.height // cfg.grid
            box = _grid_box(cfg, rng, int(rng.integers(0, cols)), int(rng.integers(0, rows)))
        else:
            w = int(rng.integers(cfg.box_width_px[0], cfg.box_width_px[1] + 1))
            h = int(round(w * rng.uniform(*cfg.aspect)))
            x0 = int(rng.integers(0, cfg.width - w + 1))
            y0 = int(rng.integers(0, cfg.height - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
        if not _fits(box, cfg):
            continue
        if all(_clear(box, other, cfg) for other in boxes):
            boxes.append(box)
    return boxes


def _zone(box, cfg: SceneConfig):
    x0, y0, x1, y1 = box
    side = np.ceil(cfg.max_patch_scale * (x1 - x0))
    cx = (x0 + x1) / 2
    margin = cfg.grid or 0
    return (min(x0, cx - side / 2) - margin, y0 - margin, max(x1, cx + side / 2) + margin, y1 + side + margin)


def _clear(a, b, cfg: SceneConfig) -> bool:
    za, zb = _zone(a, cfg), _zone(b, cfg)
    return za[2] <= zb[0] or zb[2] <= za[0] or za[3] <= zb[1] or zb[3] <= za[1]


def render_synthetic(n: int, cfg: SceneConfig | None = None,
                     rng: np.random.Generator | int | None = 0, prefix: str = "synth") -> list[AnnotatedImage]:
    """Render ``n`` scenes of dark housings holding a red or green lamp on textured gray.

    Pixel values are quantized to multiples of 1/255 so scenes survive an
    8-bit lossless round trip unchanged.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SceneConfig()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    scenes = []
    for idx in range(n):
        img = _background(cfg, rng)
        k = int(rng.integers(cfg.lights_per_scene[0], cfg.lights_per_scene[1] + 1))
        gt = []
        for box in _layout(cfg, rng, k):
            class_id = RED if rng.random() < cfg.red_fraction else GREEN
            _draw_light(img, box, class_id, cfg)
            gt.append((BBox(*map(float, box)), class_id))
        img = np.round(img * 255.0) / 255.0
        scenes.append(AnnotatedImage(torch.from_numpy(img.astype(np.float32)), gt, f"{prefix}_{idx:05d}"))
    return scenes
