"""Independent reference implementations used as test oracles.

Written in plain Python/numpy from the definitions, without calling into the
package under test.
"""

from __future__ import annotations

import math

import numpy as np


def tv_map_ref(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-pixel sqrt(dh^2 + dv^2 + eps); forward differences, zero on the last row/column."""
    x = x[..., None] if x.ndim == 2 else x
    h, w, c = x.shape
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            for k in range(c):
                dh = x[i, j + 1, k] - x[i, j, k] if j + 1 < w else 0.0
                dv = x[i + 1, j, k] - x[i, j, k] if i + 1 < h else 0.0
                out[i, j, k] = math.sqrt(dh * dh + dv * dv + eps)
    return out


def tv_ref(x: np.ndarray, eps: float = 1e-8) -> float:
    return math.fsum(tv_map_ref(x, eps).ravel()) / tv_map_ref(x, eps).size


def gaussian_kernel_ref(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = size // 2
    g = [math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)]
    k = np.array([[a * b for b in g] for a in g])
    return k / k.sum()


def _reflect(i: int, n: int) -> int:
    # numpy-style 'reflect' (edge sample not repeated), applied until in range
    if n == 1:
        return 0
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def blur_ref(d: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = d.shape
    r = kernel.shape[0] // 2
    out = np.zeros_like(d)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kernel.shape[0]):
                for b in range(kernel.shape[1]):
                    acc = acc + kernel[a, b] * d[_reflect(i + a - r, h), _reflect(j + b - r, w)]
            out[i, j] = acc
    return out


def dominance_ref(x: np.ndarray, channel: int) -> np.ndarray:
    others = [c for c in range(3) if c != channel]
    return np.maximum(x[..., channel] - np.maximum(x[..., others[0]], x[..., others[1]]), 0.0)


def suppression_map_ref(x: np.ndarray, channel: int, kernel: np.ndarray) -> np.ndarray:
    return blur_ref(dominance_ref(x, channel), kernel)


def iou_ref(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def bucket_ref(gt_box, gt_class, dets, target_class) -> str:
    """dets: list of (box tuple, class_id)."""
    hits = [c for box, c in dets if iou_ref(box, gt_box) >= 0.5]
    if len(hits) == 0:
        return "vanish"
    if target_class in hits:
        return "flip"
    if gt_class in hits:
        return "correct"
    return "other_misclass"


def ap11_ref(dets, gts, thr: float = 0.5) -> float:
    """dets: list of (image_id, box, conf); gts: {image_id: [box]}.

    Brute force: replay the greedy matching, then for each recall level take
    the best precision over every prefix of the ranked list.
    """
    n_gt = sum(len(v) for v in gts.values())
    ranked = sorted(enumerate(dets), key=lambda kv: (-kv[1][2], kv[0]))
    claimed = set()
    flags = []
    for _, (img, box, _) in ranked:
        cands = gts.get(img, [])
        ious = [iou_ref(box, g) for g in cands]
        if ious:
            g = int(np.argmax(ious))  # first index wins ties
            if ious[g] >= thr and (img, g) not in claimed:
                claimed.add((img, g))
                flags.append(True)
                continue
        flags.append(False)
    total = 0.0
    for level in range(11):
        r = level / 10
        best = 0.0
        for n in range(1, len(flags) + 1):
            tp = sum(flags[:n])
            if tp / n_gt >= r:
                best = max(best, tp / n)
        total += best
    return total / 11


def adam_ref(p0: float, grad, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8, lo=0.0, hi=1.0) -> float:
    """Scalar Adam recurrence with clamping after each step."""
    p, m, v = p0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        p = min(max(p, lo), hi)
    return p


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
