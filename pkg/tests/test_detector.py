import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from tlpatch.core import BBox, ConfigError
from tlpatch.detector import ContextBlobDetector, DetectorAdapter, make_adapter, match_predictions, register_adapter

RED, GREEN = ContextBlobDetector.RED, ContextBlobDetector.GREEN


def _disk(img, cy, cx, r, color):
    yy, xx = np.mgrid[: img.shape[0], : img.shape[1]]
    img[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r] = color


def test_black_image_has_no_detections():
    assert ContextBlobDetector().detect(torch.zeros(96, 128, 3)) == []


def test_red_disk_gives_one_red_detection_on_its_cell():
    img = np.zeros((96, 128, 3))
    _disk(img, 48, 80, 16, (1.0, 0.0, 0.0))  # fills most of cell (row 1, col 2)
    dets = ContextBlobDetector().detect(torch.from_numpy(img))
    assert len(dets) == 1
    assert dets[0].class_id == RED
    assert dets[0].box == BBox(64, 32, 96, 64)


def test_closed_form_scores():
    det = ContextBlobDetector()
    img = torch.zeros(64, 32, 3, dtype=torch.float64)
    img[:32, :, 0] = 0.8
    obj, logits = det.scores(img)
    assert float(obj[0, 0]) == pytest.approx(1 / (1 + math.exp(-12 * (0.8 - 0.15))), rel=1e-12)
    assert logits[0, 0].tolist() == pytest.approx([0.8, -0.8])
    cls, bbox = det.attack_losses(img, [(BBox(0, 0, 32, 32), GREEN)])
    assert float(cls) == pytest.approx(math.log(1 + math.exp(1.6)), rel=1e-12)
    assert float(cls) == pytest.approx(1.78390, abs=5e-6)
    assert float(bbox) == 0.0


def test_green_below_flips_label():
    det = ContextBlobDetector()
    img = torch.zeros(64, 32, 3, dtype=torch.float64)
    img[:32, :, 0] = 0.8
    img[32:, :, 1] = 1.0
    # own logit 0.8 vs context 0.6 * (0 - 1) = -0.6 -> still red
    assert [d.class_id for d in det.detect(img) if d.box.y_min == 0] == [RED]
    img[:32, :, 0] = 0.5
    # 0.5 - 0.6 < 0 -> green
    assert [d.class_id for d in det.detect(img) if d.box.y_min == 0] == [GREEN]


def test_perfect_prediction_loss_vanishes():
    det = ContextBlobDetector()
    img = torch.zeros(32, 32, 3, dtype=torch.float64)
    img[..., 0] = 1.0
    cls, bbox = det.attack_losses(img, [(BBox(0, 0, 32, 32), RED)])
    assert float(cls) < 0.25 and float(bbox) == 0.0
    cls, bbox = det.attack_losses(img, [(BBox(8, 4, 20, 28), RED)])
    assert float(bbox) == pytest.approx(((8 / 32) ** 2 + (4 / 32) ** 2 + (12 / 32) ** 2 + (4 / 32) ** 2) / 4)


def test_rejects_out_of_range_images_and_targets():
    det = ContextBlobDetector()
    with pytest.raises(ValueError):
        det.detect(torch.full((32, 32, 3), 1.5))
    with pytest.raises(ValueError):
        det.attack_losses(torch.zeros(32, 32, 3), [])
    with pytest.raises(ValueError):
        det.cell_of(40, 5, (32, 32))


def test_partial_edge_cells_average_real_pixels():
    det = ContextBlobDetector(cell_size=32)
    img = torch.zeros(40, 40, 3, dtype=torch.float64)
    img[32:, 32:, 1] = 1.0
    f = det.cell_features(img)
    assert f.shape == (2, 2, 2)
    assert float(f[1, 1, 1]) == 1.0


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_translation_covariance_by_whole_cells(seed, di, dj):
    det = ContextBlobDetector(cell_size=8)
    rng = np.random.default_rng(seed)
    base = np.zeros((80, 80, 3))
    base[:40, :40] = rng.random((40, 40, 3)) ** 3
    shifted = np.zeros_like(base)
    shifted[8 * di: 8 * di + 40, 8 * dj: 8 * dj + 40] = base[:40, :40]
    a = det.detect(torch.from_numpy(base))
    b = det.detect(torch.from_numpy(shifted))
    moved = sorted((d.box.shifted(8 * dj, 8 * di).as_tuple(), d.class_id, d.confidence) for d in a)
    got = sorted((d.box.as_tuple(), d.class_id, d.confidence) for d in b)
    # cells that had no below neighbour inside the content window are unaffected by the shift
    assert moved == got


@given(st.integers(0, 10_000))
def test_detect_and_attack_losses_consistent(seed):
    det = ContextBlobDetector(cell_size=8)
    img = torch.from_numpy(np.random.default_rng(seed).random((24, 24, 3)))
    objectness, _ = det.scores(img)
    dets = {(d.box.x_min, d.box.y_min): d for d in det.detect(img)}
    for i in range(3):
        for j in range(3):
            box = BBox(8 * j, 8 * i, 8 * j + 8, 8 * i + 8)
            for c in (RED, GREEN):
                cls, _ = det.attack_losses(img, [(box, c)])
                if float(cls) < -math.log(0.5) and (box.x_min, box.y_min) in dets:
                    assert dets[(box.x_min, box.y_min)].class_id == c


def test_detect_is_deterministic():
    img = torch.from_numpy(np.random.default_rng(5).random((64, 64, 3)))
    det = ContextBlobDetector()
    assert det.detect(img) == det.detect(img)


def test_lower_threshold_never_drops_detections():
    img = torch.from_numpy(np.random.default_rng(6).random((96, 96, 3)))
    loose = ContextBlobDetector(conf_threshold=0.3).detect(img)
    strict = ContextBlobDetector(conf_threshold=0.6).detect(img)
    assert set(strict) <= set(loose)


def test_match_predictions():
    target = BBox(0, 0, 10, 10)
    preds = [BBox(50, 50, 60, 60), BBox(1, 0, 11, 10), BBox(0, 0, 9, 10)]
    assert match_predictions(preds, target) == 2
    assert match_predictions(preds[:1], target) is None
    assert match_predictions(preds[:1], target, fallback=lambda t: 0) == 0


def test_registry():
    assert isinstance(make_adapter("context_blob", cell_size=16), ContextBlobDetector)
    with pytest.raises(ConfigError):
        make_adapter("yolo")

    class Null(DetectorAdapter):
        class_map = {0: "red"}

        def detect(self, image):
            return []

        def attack_losses(self, image, targets):
            z = torch.zeros((), dtype=image.dtype)
            return z, z

    register_adapter("null", Null)
    assert make_adapter("null").detect(torch.zeros(4, 4, 3)) == []
