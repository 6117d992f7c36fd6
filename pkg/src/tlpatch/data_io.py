"""Dataset ingestion, patch bundles and print export.

Annotation files hold one object per line, ``class_id cx cy w h``, with the
box in normalized center format. Images live in ``<root>/images`` and their
annotation files, with the same stem and a ``.txt`` suffix, in
``<root>/labels``.

Bit depth: 8-bit images are divided by 255, 16-bit single-channel images by
65535 and replicated to three channels.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from .core import (AnnotatedImage, AttackConfig, BBox, ConfigError, DataError, IntegrityError, Patch,
                   TargetClassMapping)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
BUNDLE_SCHEMA = 1
MAX_PRINT_SIDE_M = 2.0


@dataclass(frozen=True)
class ClassMap:
    name: str
    entries: dict[int, str]

    def __post_init__(self):
        if sorted(self.entries) != list(range(len(self.entries))):
            raise ConfigError(f"class map {self.name!r}: ids must be contiguous from 0")
        if len(set(self.entries.values())) != len(self.entries):
            raise ConfigError(f"class map {self.name!r}: duplicate class names")

    @classmethod
    def from_names(cls, name: str, names: Sequence[str]) -> ClassMap:
        return cls(name, dict(enumerate(names)))

    def id_of(self, class_name: str) -> int:
        for k, v in self.entries.items():
            if v == class_name:
                return k
        raise ConfigError(f"class {class_name!r} not in class map {self.name!r}")

    def mapping(self, pairs: dict[str, str]) -> TargetClassMapping:
        """Build a target mapping from class names, e.g. ``{"red_left_arrow": "green_left_arrow"}``."""
        return TargetClassMapping({self.id_of(a): self.id_of(b) for a, b in pairs.items()})


SYNTHETIC_CLASSES = ClassMap.from_names("synthetic", ["red", "green"])


def load_class_map(path: str | Path) -> ClassMap:
    """One class name per line; line order gives the id."""
    path = Path(path)
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return ClassMap.from_names(path.stem, names)


def to_unit_float(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16 or arr.dtype == np.int32 and arr.max() > 255:
        out = arr.astype(np.float32) / 65535.0
    elif np.issubdtype(arr.dtype, np.floating):
        out = arr.astype(np.float32)
    else:
        out = arr.astype(np.float32) / 255.0
    if out.ndim == 2:
        out = np.repeat(out[..., None], 3, axis=2)
    return out[..., :3]


def read_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.array(im)
        else:
            arr = np.array(im.convert("RGB"))
    return torch.from_numpy(to_unit_float(arr))


def write_image(path: str | Path, image: torch.Tensor, **save_kwargs) -> None:
    arr = np.round(image.detach().cpu().double().numpy().clip(0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, **save_kwargs)


def denormalize(cx: float, cy: float, w: float, h: float, width: int, height: int) -> tuple[float, ...]:
    xc, yc, bw, bh = cx * width, cy * height, w * width, h * height
    return (xc - bw / 2, yc - bh / 2, xc + bw / 2, yc + bh / 2)


def normalize(box: BBox, width: int, height: int) -> tuple[float, float, float, float]:
    return ((box.x_min + box.x_max) / 2 / width, (box.y_min + box.y_max) / 2 / height,
            box.width / width, box.height / height)


def parse_annotations(path: Path, width: int, height: int, class_map: ClassMap) -> list[tuple[BBox, int]]:
    boxes = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        where = f"{path}:{lineno}"
        if len(fields) != 5:
            raise DataError(f"{where}: expected 'class_id cx cy w h', got {len(fields)} fields")
        try:
            class_id = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise DataError(f"{where}: {exc}") from None
        if class_id not in class_map.entries:
            raise DataError(f"{where}: class id {class_id} not in class map {class_map.name!r}")
        x0, y0, x1, y1 = denormalize(cx, cy, w, h, width, height)
        clipped = (max(x0, 0.0), max(y0, 0.0), min(x1, float(width)), min(y1, float(height)))
        if clipped != (x0, y0, x1, y1):
            log.warning("%s: box %s clipped to image bounds", where, (x0, y0, x1, y1))
        if not (clipped[0] < clipped[2] and clipped[1] < clipped[3]):
            raise DataError(f"{where}: box is empty after clipping to the image")
        boxes.append((BBox(*clipped), class_id))
    return boxes


def load_dataset(root: str | Path, class_map: ClassMap) -> list[AnnotatedImage]:
    root = Path(root)
    image_dir, label_dir = root / "images", root / "labels"
    if not image_dir.is_dir():
        raise DataError(f"{root}: missing images/ directory")
    samples = []
    for img_path in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        label_path = label_dir / (img_path.stem + ".txt")
        if not label_path.is_file():
            raise DataError(f"{img_path}: no annotation file {label_path}")
        image = read_image(img_path)
        h, w = image.shape[:2]
        samples.append(AnnotatedImage(image, parse_annotations(label_path, w, h, class_map), img_path.stem))
    if not samples:
        raise DataError(f"{image_dir}: no images found")
    return samples


def save_dataset(samples: Sequence[AnnotatedImage], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        h, w = s.size_hw
        write_image(root / "images" / f"{s.image_id}.png", s.image)
        lines = []
        for box, class_id in s.gt_boxes:
            cx, cy, bw, bh = normalize(box, w, h)
            lines.append(f"{class_id} {cx!r} {cy!r} {bw!r} {bh!r}")
        (root / "labels" / f"{s.image_id}.txt").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


@dataclass
class PatchBundle:
    patch: Patch
    class_map: str
    mapping: TargetClassMapping
    config: AttackConfig
    training_set: str = ""
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    content_hash: str = ""

    def metadata(self) -> dict:
        return {
            "schema_version": BUNDLE_SCHEMA,
            "class_map": self.class_map,
            "mapping": {str(k): v for k, v in sorted(self.mapping.mapping.items())},
            "config": self.config.to_dict(),
            "training_set": self.training_set,
            "created": self.created,
            "side_px": self.patch.side_px,
            "dtype": str(self.patch.pixels.dtype).replace("torch.", ""),
            "content_hash": self.content_hash,
        }


def _npy_bytes(arr: np.ndarray) -> bytes:
    import io
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_patch(bundle: PatchBundle, directory: str | Path) -> Path:
    """Write ``patch.npy`` (exact pixels), ``patch.png`` (preview) and ``patch.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw = _npy_bytes(bundle.patch.pixels.detach().cpu().numpy())
    bundle.content_hash = "sha256:" + hashlib.sha256(raw).hexdigest()
    (directory / "patch.npy").write_bytes(raw)
    write_image(directory / "patch.png", bundle.patch.pixels)
    (directory / "patch.json").write_text(json.dumps(bundle.metadata(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return directory


def load_patch(directory: str | Path) -> PatchBundle:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "patch.json").read_text(encoding="utf-8"))
        raw = (directory / "patch.npy").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"incomplete patch bundle: {exc.filename}") from None
    if meta.get("schema_version") != BUNDLE_SCHEMA:
        raise DataError(f"unsupported bundle schema {meta.get('schema_version')!r}")
    digest = "sha256:" + hashlib.sha256(raw).hexdigest()
    if digest != meta["content_hash"]:
        raise IntegrityError(f"{directory}: patch content hash mismatch ({digest} != {meta['content_hash']})")
    import io
    pixels = torch.from_numpy(np.load(io.BytesIO(raw), allow_pickle=False))
    return PatchBundle(
        patch=Patch(pixels),
        class_map=meta["class_map"],
        mapping=TargetClassMapping({int(k): int(v) for k, v in meta["mapping"].items()}),
        config=AttackConfig.from_dict(meta["config"]),
        training_set=meta["training_set"],
        created=meta["created"],
        content_hash=meta["content_hash"],
    )


@dataclass(frozen=True)
class PrintArtifact:
    path: Path
    side_m: float
    side_cm: float
    side_px: int
    dpi: int


def export_print(p: Patch, light_width_m: float, scale_factor: float, dpi: int = 150,
                 out_dir: str | Path = ".", stem: str = "patch") -> PrintArtifact:
    """Rasterize ``p`` for printing at ``scale_factor`` times the light housing width."""
    if light_width_m <= 0:
        raise ConfigError("light width must be positive")
    if scale_factor <= 0:
        raise ConfigError("scale factor must be positive")
    if dpi < 72:
        raise ConfigError("dpi must be >= 72")
    side_m = scale_factor * light_width_m
    if side_m > MAX_PRINT_SIDE_M:
        raise ConfigError(f"printed side {side_m:.2f} m exceeds {MAX_PRINT_SIDE_M} m; too large to mount")
    side_cm = round(side_m * 100, 6)
    side_px = max(1, round(side_m / 0.0254 * dpi))

    arr = np.round(p.pixels.detach().cpu().double().numpy().clip(0, 1) * 255).astype(np.uint8)
    img = Image.fromarray(arr, "RGB").resize((side_px, side_px), Image.Resampling.BILINEAR)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}_{side_cm:g}x{side_cm:g}cm_{dpi}dpi.png"
    info = PngImagePlugin.PngInfo()
    info.add_text("physical_size_cm", f"{side_cm:g}x{side_cm:g}")
    img.save(path, dpi=(dpi, dpi), pnginfo=info)
    sidecar = {"side_m": side_m, "side_cm": side_cm, "side_px": side_px, "dpi": dpi,
               "light_width_m": light_width_m, "scale_factor": scale_factor}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return PrintArtifact(path, side_m, side_cm, side_px, dpi)
