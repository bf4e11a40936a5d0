import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vismotor import boxes as B
from conftest import random_boxes


def iou_oracle(a, b):
    """IoU by explicit interval overlap."""
    ox = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    oy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ox * oy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def test_iou_examples():
    assert B.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert B.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert B.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    with pytest.raises(B.BoxError):
        B.iou((0, 0, 0, 2), (0, 0, 1, 1))


def test_iou_matrix_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = random_boxes(rng, rng.integers(1, 11))
        b = random_boxes(rng, rng.integers(1, 11))
        M = B.iou_matrix(a, b)
        for i in range(len(a)):
            for j in range(len(b)):
                assert M[i, j] == pytest.approx(iou_oracle(a[i], b[j]), abs=1e-12)
                assert B.iou(a[i], b[j]) == pytest.approx(M[i, j], abs=1e-12)


def test_anchor_count_and_layout():
    size = (352, 224)
    anchors, levels = B.generate_anchors(size)
    expect = sum(math.ceil(224 / s) * math.ceil(352 / s) * 9 for s in B.STRIDES)
    assert len(anchors) == expect == B.anchor_count(size)
    assert np.array_equal(np.bincount(levels), [math.ceil(224 / s) * math.ceil(352 / s) * 9 for s in B.STRIDES])
    first = anchors[:9]
    centers = (first[:, :2] + first[:, 2:]) / 2
    assert np.allclose(centers, 4.0)
    areas = (first[:, 2] - first[:, 0]) * (first[:, 3] - first[:, 1])
    assert np.allclose(areas[:3], (32 * np.array(B.SCALES)) ** 2)
    # ratio 0.5 means half as tall as wide
    w, h = first[0, 2] - first[0, 0], first[0, 3] - first[0, 1]
    assert h / w == pytest.approx(0.5)
    # second location of level 0 is one stride to the right
    assert np.allclose(anchors[9:18, [0, 2]] - anchors[:9, [0, 2]], 8)


def test_anchor_size_factor():
    a4, _ = B.generate_anchors((256, 256), size_factor=4.0)
    a2, _ = B.generate_anchors((256, 256), size_factor=2.0)
    assert np.allclose((a4[1, 2] - a4[1, 0]) / (a2[1, 2] - a2[1, 0]), 2.0)


def test_anchor_precondition():
    with pytest.raises(B.BoxError):
        B.generate_anchors((100, 100))


def test_encode_decode_known():
    anchor = np.array([[0.0, 0.0, 10.0, 10.0]])
    box = np.array([[1.0, 2.0, 11.0, 22.0]])
    d = B.encode(box, anchor)
    assert np.allclose(d, [[10 * 0.1, 10 * 0.7, 0.0, 5 * math.log(2)]])
    assert np.allclose(B.decode(d, anchor), box)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 500), min_size=4, max_size=4), st.lists(st.floats(2, 100), min_size=4, max_size=4))
def test_encode_decode_round_trip(xy, wh):
    box = np.array([[xy[0], xy[1], xy[0] + wh[0], xy[1] + wh[1]]])
    anchor = np.array([[xy[2], xy[3], xy[2] + wh[2], xy[3] + wh[3]]])
    assert np.allclose(B.decode(B.encode(box, anchor), anchor), box, atol=1e-6)


def test_decode_clamps_extreme_scale():
    anchor = np.array([[0.0, 0.0, 1.0, 1.0]])
    out = B.decode([[0.0, 0.0, 100.0, 100.0]], anchor)
    assert out[0, 2] - out[0, 0] == pytest.approx(1000 / 16)


def test_clip_boxes():
    out = B.clip_boxes([[-5, -5, 400, 300]], 352, 198)
    assert np.array_equal(out, [[0, 0, 352, 198]])
