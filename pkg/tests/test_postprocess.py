"""Decode, IOU, and NMS behavior, including the analytic zero-logit case."""
import math

import numpy as np
import pytest

from yolotla.errors import ShapeError
from yolotla.postprocess import (Detection, decode, iou, nms,
                                 to_coco_results)
from yolotla.tensor import Tensor


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def raw_map(nc, h, w, fill=0.0):
    return np.full((1, 3 * (5 + nc), h, w), fill, dtype=np.float32)


ANCHORS = [np.array([(10.0, 12.0), (20.0, 19.0), (17.0, 42.0)])]


class TestIou:

    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_hand_case(self):
        # overlap area 1, union 4 + 4 - 1 = 7
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_symmetric_and_translation_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            a = np.sort(rng.uniform(0, 50, 4)).tolist()
            b = np.sort(rng.uniform(0, 50, 4)).tolist()
            ba = (a[0], a[2], a[1], a[3])
            bb = (b[0], b[2], b[1], b[3])
            assert iou(ba, bb) == pytest.approx(iou(bb, ba))
            shift = lambda t: (t[0] + 7, t[1] - 3, t[2] + 7, t[3] - 3)
            assert iou(shift(ba), shift(bb)) == pytest.approx(iou(ba, bb))

    def test_degenerate_is_zero(self):
        assert iou((2, 2, 2, 5), (0, 0, 4, 4)) == 0.0
        assert iou((1, 1, 1, 1), (1, 1, 1, 1)) == 0.0


class TestDecode:

    def test_zero_logits_analytic(self):
        # every gate sits at 0.5: center (g+0.5)*stride, size = anchor,
        # confidence 0.5 * 0.5 = 0.25 exactly
        maps = [Tensor(raw_map(nc=3, h=2, w=2))]
        dets = decode(maps, ANCHORS, [32], conf_threshold=0.2)
        assert len(dets) == 12   # 3 anchors x 4 cells
        for d in dets:
            assert d.confidence == pytest.approx(0.25, abs=1e-9)
        first = [d for d in dets if d.box[0] > 0 and d.box[1] > 0]
        d = dets[0]   # anchor 0, cell (0, 0): center (16, 16), size 10x12
        assert d.box == pytest.approx((11.0, 10.0, 21.0, 22.0))

    def test_threshold_one_empties(self):
        maps = [Tensor(raw_map(nc=3, h=2, w=2))]
        assert decode(maps, ANCHORS, [32], conf_threshold=1.0) == []

    def test_crafted_cell_recovers_box(self):
        # invert the decode equations for a known target box
        target_cx, target_cy, target_w, target_h = 40.0, 37.0, 30.0, 14.0
        stride, gx, gy, anchor_idx = 8, 5, 4, 1   # anchor (20, 19)
        arr = raw_map(nc=3, h=8, w=8, fill=-12.0)
        per = 8
        base = anchor_idx * per
        arr[0, base + 0, gy, gx] = logit((target_cx / stride - gx + 0.5) / 2)
        arr[0, base + 1, gy, gx] = logit((target_cy / stride - gy + 0.5) / 2)
        arr[0, base + 2, gy, gx] = logit(math.sqrt(target_w / 20.0) / 2)
        arr[0, base + 3, gy, gx] = logit(math.sqrt(target_h / 19.0) / 2)
        arr[0, base + 4, gy, gx] = 5.0
        arr[0, base + 5 + 2, gy, gx] = 4.0
        dets = decode([Tensor(arr)], ANCHORS, [stride])
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 2
        want = (target_cx - target_w / 2, target_cy - target_h / 2,
                target_cx + target_w / 2, target_cy + target_h / 2)
        for got, expect in zip(d.box, want):
            assert abs(got - expect) < 0.5
        assert d.confidence == pytest.approx(
            (1 / (1 + math.exp(-5.0))) * (1 / (1 + math.exp(-4.0))), rel=1e-6)

    def test_boxes_clipped_to_image(self):
        maps = [Tensor(raw_map(nc=3, h=2, w=2))]
        dets = decode(maps, ANCHORS, [8], conf_threshold=0.2)
        for d in dets:
            assert 0 <= d.box[0] <= d.box[2] <= 16
            assert 0 <= d.box[1] <= d.box[3] <= 16

    def test_channel_mismatch_rejected(self):
        bad = Tensor(np.zeros((1, 25, 2, 2), np.float32))
        with pytest.raises(ShapeError, match="25 channels"):
            decode([bad], ANCHORS, [32])

    def test_inconsistent_scales_rejected(self):
        maps = [Tensor(raw_map(3, 4, 4)), Tensor(raw_map(3, 2, 2))]
        anchors = [ANCHORS[0], ANCHORS[0]]
        with pytest.raises(ShapeError, match="image size"):
            decode(maps, anchors, [8, 32])

    def test_multi_scale_decode(self):
        maps = [Tensor(raw_map(3, 4, 4)), Tensor(raw_map(3, 2, 2))]
        anchors = [ANCHORS[0], 2 * ANCHORS[0]]
        dets = decode(maps, anchors, [8, 16], conf_threshold=0.2)
        assert len(dets) == 3 * 16 + 3 * 4


def det(x1, y1, x2, y2, cls=0, conf=0.9):
    return Detection(box=(x1, y1, x2, y2), class_id=cls, confidence=conf)


class TestNms:

    def test_single_kept(self):
        d = det(0, 0, 10, 10)
        assert nms([d]) == [d]

    def test_same_class_overlap_suppressed(self):
        # inter 75, union 125: IOU 0.6 > 0.45
        a = det(0, 0, 10, 10, conf=0.9)
        b = det(0, 2.5, 10, 12.5, conf=0.8)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert nms([b, a], iou_threshold=0.45) == [a]

    def test_boundary_iou_kept(self):
        a = det(0, 0, 10, 10, conf=0.9)
        b = det(0, 2.5, 10, 12.5, conf=0.8)
        assert nms([a, b], iou_threshold=0.6) == [a, b]

    def test_different_classes_both_kept(self):
        a = det(0, 0, 10, 10, cls=0, conf=0.9)
        b = det(0, 2.5, 10, 12.5, cls=1, conf=0.8)
        assert nms([b, a]) == [a, b]

    def test_output_subset_and_sorted(self):
        rng = np.random.default_rng(3)
        dets = []
        for _ in range(60):
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(4, 30, 2)
            dets.append(det(x, y, x + w, y + h, cls=int(rng.integers(3)),
                            conf=float(rng.uniform(0.1, 1.0))))
        out = nms(dets, iou_threshold=0.5)
        assert set(out) <= set(dets)
        confs = [d.confidence for d in out]
        assert confs == sorted(confs, reverse=True)

    def test_no_retained_same_class_pair_overlaps(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            dets = []
            for _ in range(40):
                x, y = rng.uniform(0, 60, 2)
                w, h = rng.uniform(5, 25, 2)
                dets.append(det(x, y, x + w, y + h,
                                cls=int(rng.integers(2)),
                                conf=float(rng.uniform(0.1, 1.0))))
            out = nms(dets, iou_threshold=0.45)
            for i, a in enumerate(out):
                for b in out[i + 1:]:
                    if a.class_id == b.class_id:
                        assert iou(a.box, b.box) <= 0.45

    def test_tie_break_is_deterministic(self):
        a = det(5, 5, 10, 10, cls=1, conf=0.7)
        b = det(0, 0, 4, 4, cls=0, conf=0.7)
        assert nms([a, b]) == [b, a]
        assert nms([b, a]) == [b, a]


class TestCocoSerialization:

    def test_xywh_conversion(self):
        rows = to_coco_results([det(10, 20, 30, 60, cls=2, conf=0.5)],
                               image_id=7, category_ids=[1, 2, 44])
        assert rows == [{"image_id": 7, "category_id": 44,
                         "bbox": [10, 20, 20, 40], "score": 0.5}]

    def test_identity_category_mapping(self):
        rows = to_coco_results([det(0, 0, 1, 1, cls=3)], image_id=1)
        assert rows[0]["category_id"] == 3
