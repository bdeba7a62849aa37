import csv

import numpy as np
import pytest

from ssvd import backbone, heads
from ssvd.errors import DimensionError


def test_total_anchor_count_448():
    anchors = heads.generate_anchors((448, 448))
    assert len(anchors) == 37485  # 9 * (56^2 + 28^2 + 14^2 + 7^2)


def test_anchor_count_matches_level_sizes():
    anchors = heads.generate_anchors((128, 64))
    sizes = backbone.level_sizes(128, 64)
    total = sum(9 * h * w for h, w in sizes.values())
    assert len(anchors) == total
    for lv, (h, w) in sizes.items():
        sl = anchors.level_slices[lv]
        assert sl.stop - sl.start == 9 * h * w


def test_anchor_shapes_level3():
    shapes = heads.anchor_shapes(3)
    # slot 0: ratio 0.5, factor 1: w = 32/sqrt(2), h = 32*sqrt(2)
    assert np.isclose(shapes[0, 0], 32.0 / np.sqrt(2.0))
    assert np.isclose(shapes[0, 1], 32.0 * np.sqrt(2.0))
    # slot 4: ratio 1, factor 2^(1/3): square with area 1024 * 2^(2/3)
    assert np.isclose(shapes[4, 0], shapes[4, 1])
    assert np.isclose(shapes[4, 0] * shapes[4, 1], 1024.0 * 2.0 ** (2.0 / 3.0))
    # every slot preserves area * factor^2
    for i, (r, f) in enumerate((r, f) for r in heads.RATIOS for f in heads.SIZE_FACTORS):
        assert np.isclose(shapes[i, 0] * shapes[i, 1], 1024.0 * f * f)
        assert np.isclose(shapes[i, 0] / shapes[i, 1], r)


def test_anchor_centers_and_order():
    anchors = heads.generate_anchors((64, 64))
    sl = anchors.level_slices[3]  # 8x8 grid, 576 anchors
    assert sl.start == 0 and sl.stop == 8 * 8 * 9
    # first anchor: level 3, y=0, x=0, slot 0, centered at (4, 4)
    b = anchors.boxes[0]
    assert np.isclose((b[0] + b[2]) / 2, 4.0) and np.isclose((b[1] + b[3]) / 2, 4.0)
    # anchor order is (y, x, slot): index 9 is (y=0, x=1)
    b9 = anchors.boxes[9]
    assert np.isclose((b9[0] + b9[2]) / 2, 12.0)
    assert anchors.slot[9] == 0 and anchors.grid_x[9] == 1 and anchors.grid_y[9] == 0
    # level array consistent with slices
    assert np.all(anchors.level[anchors.level_slices[4]] == 4)


def test_anchor_input_divisibility():
    with pytest.raises(DimensionError, match="64"):
        heads.generate_anchors((100, 64))


def test_anchor_csv(tmp_path):
    anchors = heads.generate_anchors((64, 64))
    path = tmp_path / "anchors.csv"
    heads.write_anchor_csv(path, anchors)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["level", "y", "x", "slot", "x1", "y1", "x2", "y2"]
    assert len(rows) == len(anchors) + 1
    assert rows[1][:4] == ["3", "0", "0", "0"]


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    anchors = heads.generate_anchors((64, 64))
    idx = rng.choice(len(anchors), size=200, replace=False)
    a = anchors.boxes[idx]
    gt = a + rng.uniform(-4, 4, size=a.shape)
    gt = np.stack([np.minimum(gt[:, 0], gt[:, 2]) - 1.0, np.minimum(gt[:, 1], gt[:, 3]) - 1.0,
                   np.maximum(gt[:, 0], gt[:, 2]) + 1.0, np.maximum(gt[:, 1], gt[:, 3]) + 1.0],
                  axis=1)
    deltas = heads.encode_boxes(a, gt)
    back = heads.decode_boxes(a, deltas)
    assert np.max(np.abs(back - gt)) < 1e-4


def test_encode_rejects_degenerate_gt():
    a = np.array([[0.0, 0.0, 10.0, 10.0]])
    with pytest.raises(ValueError, match="degenerate"):
        heads.encode_boxes(a, np.array([[5.0, 5.0, 5.0, 8.0]]))


def test_zero_deltas_decode_to_anchor():
    anchors = heads.generate_anchors((64, 64))
    out = heads.decode_boxes(anchors.boxes[:50], np.zeros((50, 4)))
    assert np.allclose(out, anchors.boxes[:50])


def test_iou_matrix_known_value():
    a = np.array([[0.0, 0.0, 2.0, 2.0]])
    b = np.array([[1.0, 1.0, 3.0, 3.0]])
    assert np.isclose(heads.iou_matrix(a, b)[0, 0], 1.0 / 7.0)


def test_matching_thresholds():
    anchors = heads.generate_anchors((64, 64))
    # gt exactly equal to an anchor box -> that anchor is foreground
    target = 100
    gt = anchors.boxes[target:target + 1].copy()
    m = heads.match_anchors(anchors, gt, np.array([2]))
    assert m.labels[target] == 2
    assert m.matched_gt[target] == 0
    assert m.num_foreground >= 1
    # anchors far away are background
    far = np.nonzero(heads.iou_matrix(anchors.boxes, gt)[:, 0] == 0.0)[0]
    assert np.all(m.labels[far] == 0)
    # deltas of the exact match are ~0
    assert np.allclose(m.deltas[target], 0.0, atol=1e-9)


def test_matching_ignore_band():
    anchors = heads.generate_anchors((64, 64))
    gt = anchors.boxes[40:41].copy()
    m = heads.match_anchors(anchors, gt, np.array([1]))
    ious = heads.iou_matrix(anchors.boxes, gt)[:, 0]
    band = (ious >= 0.4) & (ious < 0.5)
    claimed = int(np.argmax(ious))
    for i in np.nonzero(band)[0]:
        if i != claimed:
            assert m.labels[i] == -1


def test_force_claim_low_iou_gt():
    anchors = heads.generate_anchors((64, 64))
    gt = np.array([[30.0, 30.0, 36.0, 36.0]])  # 6x6: max IoU far below 0.5
    ious = heads.iou_matrix(anchors.boxes, gt)[:, 0]
    assert ious.max() < 0.5
    m = heads.match_anchors(anchors, gt, np.array([3]))
    fg = np.nonzero(m.labels > 0)[0]
    assert len(fg) == 1 and fg[0] == int(np.argmax(ious))
    assert m.labels[fg[0]] == 3 and m.num_foreground == 1


def test_force_claim_duplicate_gt_gets_distinct_anchors():
    anchors = heads.generate_anchors((64, 64))
    gt = np.array([[30.0, 30.0, 36.0, 36.0], [30.0, 30.0, 36.0, 36.0]])
    m = heads.match_anchors(anchors, gt, np.array([1, 2]))
    fg = np.nonzero(m.labels > 0)[0]
    assert len(fg) == 2
    assert m.matched_gt[fg[0]] != m.matched_gt[fg[1]]


def test_every_gt_keeps_an_anchor_randomized():
    anchors = heads.generate_anchors((64, 64))
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = rng.integers(1, 5)
        cx = rng.uniform(8, 56, n)
        cy = rng.uniform(8, 56, n)
        w = rng.uniform(4, 40, n)
        h = rng.uniform(4, 40, n)
        gt = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        labels = rng.integers(1, 4, n)
        m = heads.match_anchors(anchors, gt, labels)
        assert set(range(n)) <= set(m.matched_gt[m.labels > 0].tolist())


def test_head_forward_shapes():
    w = heads.init_head_weights(seed=0, channels=32, num_classes=3)
    bw = backbone.init_backbone_weights(seed=1)
    rng = np.random.default_rng(2)
    pyr = backbone.extract_pyramid(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32), bw)
    out = heads.head_forward(pyr, w)
    assert sorted(out) == [3, 4, 5, 6]
    cls3, box3 = out[3]
    assert cls3.shape == (1, 27, 8, 8) and box3.shape == (1, 36, 8, 8)


def test_flatten_order_matches_anchor_enumeration():
    anchors = heads.generate_anchors((64, 64))
    sizes = backbone.level_sizes(64, 64)
    k = 3
    outputs = {}
    for lv, (h, w) in sizes.items():
        cls = np.zeros((1, k * 9, h, w), np.float32)
        box = np.zeros((1, 4 * 9, h, w), np.float32)
        for a in range(9):
            for c in range(k):
                cls[0, a * k + c] = (lv * 10000 + a * 100 + c) + \
                    np.arange(h)[:, None] * 0.001 + np.arange(w)[None, :] * 0.000001
            for d in range(4):
                box[0, a * 4 + d] = lv + a * 0.1 + d * 0.01
        outputs[lv] = (cls, box)
    logits, deltas = heads.flatten_head_outputs(outputs, anchors, k)
    assert logits.shape == (len(anchors), 3) and deltas.shape == (len(anchors), 4)
    rng = np.random.default_rng(3)
    for i in rng.choice(len(anchors), 50, replace=False):
        lv, y, x, a = (int(anchors.level[i]), int(anchors.grid_y[i]),
                       int(anchors.grid_x[i]), int(anchors.slot[i]))
        for c in range(k):
            expect = np.float32((lv * 10000 + a * 100 + c) + y * 0.001 + x * 0.000001)
            assert logits[i, c] == expect
        assert np.allclose(deltas[i], [lv + a * 0.1 + d * 0.01 for d in range(4)],
                           atol=1e-6)


def test_flatten_rejects_wrong_channels():
    anchors = heads.generate_anchors((64, 64))
    sizes = backbone.level_sizes(64, 64)
    outputs = {lv: (np.zeros((1, 12, h, w), np.float32),
                    np.zeros((1, 36, h, w), np.float32))
               for lv, (h, w) in sizes.items()}
    with pytest.raises(DimensionError):
        heads.flatten_head_outputs(outputs, anchors, 3)


def test_head_weight_determinism():
    a = heads.init_head_weights(seed=4, channels=16, num_classes=3)
    b = heads.init_head_weights(seed=4, channels=16, num_classes=3)
    assert np.array_equal(a.convs["cls.out"].kernel, b.convs["cls.out"].kernel)
    c = heads.init_head_weights(seed=5, channels=16, num_classes=3)
    assert not np.array_equal(a.convs["cls.out"].kernel, c.convs["cls.out"].kernel)
