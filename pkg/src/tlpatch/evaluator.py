"""Attack outcome metrics: label flips, vanishing, fabrication and per-class AP."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import compositor
from .core import AnnotatedImage, AttackConfig, BBox, Detection, Patch, TargetClassMapping, iou
from .detector import DetectorAdapter
from .synthetic import render_synthetic  # noqa: F401  (re-exported)

MATCH_IOU = 0.5
FABRICATION_IOU = 0.3
BUCKETS = ("flip", "correct", "vanish", "other_misclass")
SIZE_BINS = ((0, 16), (16, 24), (24, 32), (32, 48), (48, float("inf")))


def classify_target(gt: BBox, gt_class: int, detections: Sequence[Detection], m: TargetClassMapping,
                    threshold: float = MATCH_IOU) -> str:
    overlapping = [d for d in detections if iou(d.box, gt) >= threshold]
    if not overlapping:
        return "vanish"
    if any(d.class_id == m(gt_class) for d in overlapping):
        return "flip"
    if any(d.class_id == gt_class for d in overlapping):
        return "correct"
    return "other_misclass"


def is_fabricated(det: Detection, gt_boxes: Sequence[tuple[BBox, int]], threshold: float = FABRICATION_IOU) -> bool:
    return all(iou(det.box, box) < threshold for box, _ in gt_boxes)


def average_precision(detections: Sequence[tuple[str, Detection]], gt: dict[str, list[BBox]],
                      threshold: float = MATCH_IOU) -> float:
    """11-point interpolated AP for one class.

    ``detections`` are ``(image_id, detection)`` pairs of that class; ``gt``
    maps image id to that class's boxes. Detections are visited by descending
    confidence (stable on ties). A detection is a true positive when its
    highest-IoU box of that image reaches ``threshold`` and is still unclaimed.
    """
    n_gt = sum(len(v) for v in gt.values())
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    order = sorted(range(len(detections)), key=lambda k: -detections[k][1].confidence)
    used = {img: [False] * len(boxes) for img, boxes in gt.items()}
    tp = fp = 0
    precision, recall = [], []
    for k in order:
        img, det = detections[k]
        best, best_iou = -1, -1.0
        for g, box in enumerate(gt.get(img, ())):
            v = iou(det.box, box)
            if v > best_iou:
                best, best_iou = g, v
        if best_iou >= threshold and not used[img][best]:
            used[img][best] = True
            tp += 1
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / n_gt)
    ap = 0.0
    for i in range(11):
        r = i / 10
        ps = [p for p, rc in zip(precision, recall) if rc >= r]
        ap += max(ps) if ps else 0.0
    return ap / 11


def per_class_ap(runs: Sequence[tuple[AnnotatedImage, list[Detection]]], class_ids) -> dict[int, float]:
    out = {}
    for c in class_ids:
        gt = {s.image_id: [b for b, k in s.gt_boxes if k == c] for s, _ in runs}
        if not any(gt.values()):
            continue
        dets = [(s.image_id, d) for s, ds in runs for d in ds if d.class_id == c]
        out[c] = average_precision(dets, gt)
    return out


@dataclass
class ImageRecord:
    image_id: str
    buckets: list[str]
    target_widths: list[float]
    fabricated: bool
    n_fabricated: int
    n_detections: int


@dataclass
class AttackReport:
    n_targets: int
    n_images: int
    flip_rate: float
    vanish_rate: float
    correct_rate: float
    other_misclass_rate: float
    fabrication_rate: float
    per_class_ap_clean: dict[int, float]
    per_class_ap_patched: dict[int, float] | None
    bucket_counts: dict[str, int]
    per_size: dict[str, dict[str, int]]
    per_image: list[ImageRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        d = self.to_dict()
        for key in ("per_class_ap_clean", "per_class_ap_patched"):
            if d[key] is not None:
                d[key] = {str(k): v for k, v in d[key].items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _size_bin(width: float) -> str:
    for lo, hi in SIZE_BINS:
        if lo <= width < hi:
            return f"{lo}-{hi}" if hi != float("inf") else f"{lo}+"
    return "?"


def patched_image(sample: AnnotatedImage, patch: Patch, m: TargetClassMapping, scale: float,
                  opacity: float = 1.0):
    """Sample image with the patch under every relevant box that has room for it."""
    h, w = sample.size_hw
    image = sample.image
    for box, class_id in sample.gt_boxes:
        if class_id not in m:
            continue
        placement = compositor.placement_for(box, (w, h), scale)
        if placement is not None:
            image = compositor.apply(patch, image, placement, compositor.IDENTITY, opacity=opacity)
    return image


def score_detections(runs: Sequence[tuple[AnnotatedImage, list[Detection]]], m: TargetClassMapping):
    counts = Counter({b: 0 for b in BUCKETS})
    per_size: dict[str, Counter] = defaultdict(Counter)
    records = []
    for sample, dets in runs:
        buckets, widths = [], []
        for box, class_id in sample.gt_boxes:
            if class_id not in m:
                continue
            b = classify_target(box, class_id, dets, m)
            buckets.append(b)
            widths.append(box.width)
            counts[b] += 1
            per_size[_size_bin(box.width)][b] += 1
        n_fab = sum(is_fabricated(d, sample.gt_boxes) for d in dets)
        records.append(ImageRecord(sample.image_id, buckets, widths, n_fab > 0, n_fab, len(dets)))
    return counts, per_size, records


def evaluate(dataset: Sequence[AnnotatedImage], adapter: DetectorAdapter, patch: Patch | None,
             m: TargetClassMapping, cfg: AttackConfig | None = None, *, opacity: float = 1.0,
             keep_detections: list | None = None) -> AttackReport:
    """Score an attack. With ``patch=None`` the buckets describe the clean run.

    Patches are composited under every relevant box at ``cfg.eval_scale`` with
    the identity transform. AP is reported for the clean run and, when a patch
    is given, for the patched run too.
    """
    if not dataset:
        raise ValueError("empty dataset")
    cfg = cfg or AttackConfig()
    clean_runs = [(s, adapter.detect(s.image)) for s in dataset]
    if patch is None:
        runs = clean_runs
    else:
        runs = [(s, adapter.detect(patched_image(s, patch, m, cfg.eval_scale, opacity).detach()))
                for s in dataset]
    if keep_detections is not None:
        keep_detections.extend(runs)

    counts, per_size, records = score_detections(runs, m)
    n_targets = sum(counts.values())
    rate = (lambda b: counts[b] / n_targets) if n_targets else (lambda b: 0.0)
    class_ids = sorted(adapter.class_map)
    return AttackReport(
        n_targets=n_targets,
        n_images=len(dataset),
        flip_rate=rate("flip"),
        vanish_rate=rate("vanish"),
        correct_rate=rate("correct"),
        other_misclass_rate=rate("other_misclass"),
        fabrication_rate=sum(r.fabricated for r in records) / len(records),
        per_class_ap_clean=per_class_ap(clean_runs, class_ids),
        per_class_ap_patched=per_class_ap(runs, class_ids) if patch is not None else None,
        bucket_counts=dict(counts),
        per_size={k: dict(v) for k, v in sorted(per_size.items())},
        per_image=records,
    )
