import json
import logging

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from tlpatch.core import AttackConfig, BBox, ConfigError, DataError, IntegrityError, Patch, TargetClassMapping
from tlpatch.data_io import (SYNTHETIC_CLASSES, ClassMap, PatchBundle, denormalize, export_print, load_class_map,
                             load_dataset, load_patch, normalize, save_dataset, save_patch)
from tlpatch.synthetic import SceneConfig, render_synthetic


def _write(root, name, arr, label_text):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(root / "images" / f"{name}.png")
    (root / "labels" / f"{name}.txt").write_text(label_text)


def test_class_map_invariants(tmp_path):
    cm = ClassMap.from_names("lisa", ["red", "green", "red_left_arrow", "green_left_arrow"])
    assert cm.mapping({"red_left_arrow": "green_left_arrow"}) == TargetClassMapping({2: 3})
    with pytest.raises(ConfigError):
        ClassMap("bad", {0: "red", 2: "green"})
    with pytest.raises(ConfigError):
        ClassMap.from_names("dup", ["red", "red"])
    with pytest.raises(ConfigError):
        cm.id_of("blue")
    f = tmp_path / "dtld.txt"
    f.write_text("red\ngreen\nyellow\n\n")
    assert load_class_map(f).entries == {0: "red", 1: "green", 2: "yellow"}


def test_center_format_example(tmp_path):
    _write(tmp_path, "a", np.zeros((480, 640, 3), np.uint8), "0 0.5 0.5 0.1 0.2\n")
    (s,) = load_dataset(tmp_path, SYNTHETIC_CLASSES)
    assert s.gt_boxes == [(BBox(288, 192, 352, 288), 0)]
    assert s.image.dtype == torch.float32 and float(s.image.max()) <= 1.0


def test_empty_annotation_file(tmp_path):
    _write(tmp_path, "a", np.zeros((20, 20, 3), np.uint8), "")
    assert load_dataset(tmp_path, SYNTHETIC_CLASSES)[0].gt_boxes == []


def test_malformed_line_names_file_and_line(tmp_path):
    _write(tmp_path, "a", np.zeros((20, 20, 3), np.uint8), "0 0.5 0.5 0.1 0.2\n0 0.5 0.5 0.1\n")
    with pytest.raises(DataError, match=r"a\.txt:2"):
        load_dataset(tmp_path, SYNTHETIC_CLASSES)


def test_unknown_class_rejected(tmp_path):
    _write(tmp_path, "a", np.zeros((20, 20, 3), np.uint8), "5 0.5 0.5 0.1 0.2\n")
    with pytest.raises(DataError, match="class id 5"):
        load_dataset(tmp_path, SYNTHETIC_CLASSES)


def test_out_of_bounds_box_clipped_with_warning(tmp_path, caplog):
    _write(tmp_path, "a", np.zeros((100, 100, 3), np.uint8), "1 0.98 0.5 0.1 0.2\n")
    with caplog.at_level(logging.WARNING):
        (s,) = load_dataset(tmp_path, SYNTHETIC_CLASSES)
    assert s.gt_boxes[0][0] == BBox(93, 40, 100, 60)
    assert "clipped" in caplog.text


def test_missing_annotation_file(tmp_path):
    _write(tmp_path, "a", np.zeros((10, 10, 3), np.uint8), "")
    (tmp_path / "labels" / "a.txt").unlink()
    with pytest.raises(DataError, match="no annotation"):
        load_dataset(tmp_path, SYNTHETIC_CLASSES)


def test_sixteen_bit_grayscale(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    arr = np.full((8, 8), 65535 // 2, dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "images" / "g.png")
    (tmp_path / "labels" / "g.txt").write_text("")
    (s,) = load_dataset(tmp_path, SYNTHETIC_CLASSES)
    assert s.image.shape == (8, 8, 3)
    assert float(s.image[0, 0, 0]) == pytest.approx(0.5, abs=1e-4)


def test_synthetic_round_trip_is_exact(tmp_path):
    data = render_synthetic(3, SceneConfig(), 5)
    save_dataset(data, tmp_path)
    loaded = load_dataset(tmp_path, SYNTHETIC_CLASSES)
    for a, b in zip(data, loaded):
        assert a.image_id == b.image_id
        assert torch.equal(a.image, b.image)
        assert a.gt_boxes == b.gt_boxes


@given(st.integers(1, 2000), st.integers(1, 2000), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_normalization_inverse_within_half_pixel(w, h, cx, cy, bw, bh):
    x0, y0, x1, y1 = denormalize(cx, cy, bw, bh, w, h)
    if not (x0 < x1 and y0 < y1):
        return
    back = normalize(BBox(x0, y0, x1, y1), w, h)
    again = denormalize(*back, w, h)
    assert max(abs(a - b) for a, b in zip(again, (x0, y0, x1, y1))) <= 0.5


def _bundle(dtype=torch.float32):
    return PatchBundle(Patch(torch.rand(12, 12, 3, dtype=dtype)), "synthetic", TargetClassMapping({0: 1}),
                       AttackConfig(), training_set="train-v1")


def test_patch_bundle_round_trip(tmp_path):
    b = _bundle()
    save_patch(b, tmp_path / "p")
    back = load_patch(tmp_path / "p")
    assert torch.equal(back.patch.pixels, b.patch.pixels)
    assert back.metadata() == b.metadata()
    assert back.config.pgd_steps == 10 and back.config.learning_rate == 0.05
    meta = json.loads((tmp_path / "p" / "patch.json").read_text())
    assert meta["schema_version"] == 1 and meta["content_hash"].startswith("sha256:")
    assert (tmp_path / "p" / "patch.png").exists()


def test_tampered_patch_rejected(tmp_path):
    save_patch(_bundle(torch.float64), tmp_path)
    raw = bytearray((tmp_path / "patch.npy").read_bytes())
    raw[-1] ^= 0xFF
    (tmp_path / "patch.npy").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_patch(tmp_path)


@pytest.mark.parametrize("factor, cm", [(1.5, 45), (2.0, 60), (2.5, 75)])
def test_print_sizes(tmp_path, factor, cm):
    art = export_print(Patch(torch.rand(10, 10, 3)), 0.30, factor, dpi=72, out_dir=tmp_path)
    assert art.side_cm == cm
    assert f"{cm}x{cm}cm" in art.path.name
    with Image.open(art.path) as im:
        assert im.size == (art.side_px, art.side_px)
        assert im.info["physical_size_cm"] == f"{cm}x{cm}"
    assert art.side_px == round(cm / 2.54 * 72)


def test_print_refuses_oversized_and_bad_args(tmp_path):
    p = Patch(torch.rand(4, 4, 3))
    with pytest.raises(ConfigError, match="exceeds"):
        export_print(p, 0.9, 2.5, out_dir=tmp_path)
    with pytest.raises(ConfigError):
        export_print(p, 0.3, 2.0, dpi=50, out_dir=tmp_path)
    with pytest.raises(ConfigError):
        export_print(p, 0.0, 2.0, out_dir=tmp_path)
