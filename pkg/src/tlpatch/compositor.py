"""Patch application: placement below a light, EOT sampling and compositing.

The patch is mapped into the image through a plane-to-image homography. Tilt
about the x/y axes is modelled by rotating the patch plane in front of a
pinhole camera whose focal length equals the viewing distance, so an
untilted patch projects onto its placement rect with unit scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import BBox, EotRanges, Patch


@dataclass(frozen=True)
class Placement:
    rect: BBox
    scale_factor: float


@dataclass(frozen=True)
class TransformParams:
    rot_x_deg: float = 0.0
    rot_y_deg: float = 0.0
    rot_z_deg: float = 0.0
    brightness: float = 1.0
    translate_dx: float = 0.0
    translate_dy: float = 0.0

    @property
    def has_rotation(self) -> bool:
        return bool(self.rot_x_deg or self.rot_y_deg or self.rot_z_deg)


IDENTITY = TransformParams()


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def placement_for(gt: BBox, image_size: tuple[int, int], scale_factor: float) -> Placement | None:
    """Square rect directly below ``gt``, or None when it leaves the image.

    ``image_size`` is ``(width, height)``.
    """
    if scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    width, height = image_size
    side = max(1, _round_half_up(scale_factor * gt.width))
    cx = (gt.x_min + gt.x_max) / 2
    x_min = _round_half_up(cx - side / 2)
    y_min = gt.y_max
    rect = (x_min, y_min, x_min + side, y_min + side)
    if rect[0] < 0 or rect[1] < 0 or rect[2] > width or rect[3] > height:
        return None
    return Placement(BBox(*rect), scale_factor)


def sample_transform(ranges: EotRanges, rng: np.random.Generator) -> TransformParams:
    if not ranges.enabled:
        return IDENTITY
    pad = int(ranges.translate_pad_px)
    return TransformParams(
        rot_x_deg=float(rng.uniform(*ranges.rot_xy_deg)),
        rot_y_deg=float(rng.uniform(*ranges.rot_xy_deg)),
        rot_z_deg=float(rng.uniform(*ranges.rot_z_deg)),
        brightness=float(rng.uniform(*ranges.brightness)),
        # padded-crop translation: whole-pixel offsets
        translate_dx=float(rng.integers(-pad, pad + 1)),
        translate_dy=float(rng.integers(-pad, pad + 1)),
    )


def sample_scale(scale_range: tuple[float, float], rng: np.random.Generator) -> float:
    lo, hi = scale_range
    return lo if lo == hi else float(rng.uniform(lo, hi))


def _clip_translation(rect: BBox, dx: float, dy: float, width: int, height: int) -> tuple[float, float]:
    dx = min(max(dx, -rect.x_min), width - rect.x_max)
    dy = min(max(dy, -rect.y_min), height - rect.y_max)
    return dx, dy


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    rx, ry, rz = np.deg2rad([rx, ry, rz])
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def patch_homography(rect: BBox, t: TransformParams, view_distance: float = 4.0) -> np.ndarray:
    """3x3 map from normalized patch coords ``(u, v, 1)`` in ``[-1, 1]^2`` to image pixels.

    ``view_distance`` is measured in patch widths.
    """
    half = rect.width / 2
    cx, cy = rect.center
    depth = view_distance * rect.width
    r = _rotation(t.rot_x_deg, t.rot_y_deg, t.rot_z_deg)
    k = np.array([[depth, 0.0, cx], [0.0, depth, cy], [0.0, 0.0, 1.0]])
    plane = np.column_stack([half * r[:, 0], half * r[:, 1], [0.0, 0.0, depth]])
    return k @ plane


def footprint_corners(rect: BBox, t: TransformParams, view_distance: float = 4.0) -> np.ndarray:
    h = patch_homography(rect, t, view_distance)
    uv = np.array([[-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=np.float64).T
    xy = h @ uv
    return (xy[:2] / xy[2]).T


def transformed_rect(placement: Placement, t: TransformParams, image_size: tuple[int, int]) -> BBox:
    """Placement rect after translation jitter, clipped to stay inside the image."""
    width, height = image_size
    rect = placement.rect
    if not rect.within(width, height):
        raise ValueError(f"placement {rect.as_tuple()} does not fit a {width}x{height} image")
    dx, dy = _clip_translation(rect, t.translate_dx, t.translate_dy, width, height)
    return rect.shifted(dx, dy)


def _taps(n_in: int, n_out: int, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    # half-pixel centers, source coordinate clamped at 0 (as F.interpolate with align_corners=False)
    src = (torch.arange(n_out, dtype=torch.float64) + 0.5) * (n_in / n_out) - 0.5
    src = src.clamp(min=0.0)
    i0 = src.floor().long().clamp(max=n_in - 1)
    i1 = (i0 + 1).clamp(max=n_in - 1)
    return i0, i1, (src - i0).to(dtype)


def resize_bilinear(pixels: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear ``H x W x C`` resize in lerp form ``a + w (b - a)``, exact on constant input."""
    h, w = pixels.shape[:2]
    r0, r1, wy = _taps(h, side, pixels.dtype)
    c0, c1, wx = _taps(w, side, pixels.dtype)
    top, bottom = pixels[r0], pixels[r1]
    rows = top + wy[:, None, None] * (bottom - top)
    left, right = rows[:, c0], rows[:, c1]
    return left + wx[None, :, None] * (right - left)


def _to_nchw(pixels: torch.Tensor) -> torch.Tensor:
    return pixels.permute(2, 0, 1).unsqueeze(0)


def _blend(sampled: torch.Tensor, background: torch.Tensor, brightness: float, opacity: float) -> torch.Tensor:
    out = torch.clamp(sampled * brightness, 0.0, 1.0)
    if opacity != 1.0:
        out = background * (1.0 - opacity) + out * opacity
    return out


def apply(
    p: Patch,
    x: torch.Tensor,
    placement: Placement,
    t: TransformParams = IDENTITY,
    *,
    opacity: float = 1.0,
    view_distance: float = 4.0,
) -> torch.Tensor:
    """Composite ``p`` into a copy of ``x``; differentiable w.r.t. the patch pixels.

    Pixels outside the transformed footprint are copied from ``x`` unchanged.
    """
    height, width = int(x.shape[0]), int(x.shape[1])
    rect = transformed_rect(placement, t, (width, height))
    pixels = p.pixels.to(x.dtype) if not p.pixels.dtype == x.dtype else p.pixels
    out = x.clone()

    aligned = all(float(v).is_integer() for v in rect.as_tuple())
    if aligned and not t.has_rotation:
        x0, y0, x1, y1 = (int(v) for v in rect.as_tuple())
        side = x1 - x0
        resized = resize_bilinear(pixels, side)
        out[y0:y1, x0:x1] = _blend(resized, x[y0:y1, x0:x1], t.brightness, opacity)
        return out

    h = patch_homography(rect, t, view_distance)
    corners = footprint_corners(rect, t, view_distance)
    x0 = max(0, math.floor(corners[:, 0].min()))
    y0 = max(0, math.floor(corners[:, 1].min()))
    x1 = min(width, math.ceil(corners[:, 0].max()))
    y1 = min(height, math.ceil(corners[:, 1].max()))
    if x0 >= x1 or y0 >= y1:
        return out

    hinv = np.linalg.inv(h)
    jj, ii = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    pts = np.stack([jj, ii, np.ones_like(jj)], axis=-1) @ hinv.T
    w = pts[..., 2]
    u = pts[..., 0] / w
    v = pts[..., 1] / w
    inside = (w > 0) & (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)

    grid = torch.from_numpy(np.stack([u, v], axis=-1)).to(x.dtype).unsqueeze(0)
    sampled = F.grid_sample(_to_nchw(pixels), grid, mode="bilinear", padding_mode="border", align_corners=False)
    sampled = sampled[0].permute(1, 2, 0)
    region = x[y0:y1, x0:x1]
    mask = torch.from_numpy(inside).unsqueeze(-1)
    out[y0:y1, x0:x1] = torch.where(mask, _blend(sampled, region, t.brightness, opacity), region)
    return out


def footprint_mask(x_size: tuple[int, int], placement: Placement, t: TransformParams = IDENTITY,
                   view_distance: float = 4.0) -> np.ndarray:
    """Boolean ``H x W`` mask of pixels that :func:`apply` may overwrite."""
    width, height = x_size
    rect = transformed_rect(placement, t, (width, height))
    hinv = np.linalg.inv(patch_homography(rect, t, view_distance))
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pts = np.stack([jj, ii, np.ones_like(jj)], axis=-1) @ hinv.T
    w = pts[..., 2]
    return (w > 0) & (np.abs(pts[..., 0] / w) <= 1.0) & (np.abs(pts[..., 1] / w) <= 1.0)
