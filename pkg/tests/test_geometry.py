import math

import numpy as np
import pytest

from ulmdetr.geometry import (BBoxA, BBoxN, box_loss, clamp_cxcywh, cxcywh_to_xyxy, giou, iou,
                              pairwise_giou_array, pairwise_iou_array, to_absolute,
                              to_normalized, xyxy_to_cxcywh)

from conftest import random_box_pairs


def raster_iou(a, b, step=0.25):
    """Area by counting sub-pixel cells; independent of the analytic formula."""
    xs = np.arange(0, 12, step) + step / 2
    X, Y = np.meshgrid(xs, xs)

    def mask(box):
        return (X >= box[0]) & (X < box[2]) & (Y >= box[1]) & (Y < box[3])

    ma, mb = mask(a), mask(b)
    return (ma & mb).sum() / (ma | mb).sum()


def test_to_absolute_examples():
    assert to_absolute(BBoxN(0.5, 0.5, 1.0, 1.0), 64, 64) == BBoxA(0, 0, 64, 64)
    assert to_absolute(BBoxN(0.25, 0.25, 0.5, 0.5), 100, 100) == BBoxA(0, 0, 50, 50)


def test_to_absolute_rejects_bad_dims():
    with pytest.raises(ValueError):
        to_absolute(BBoxN(0.5, 0.5, 0.2, 0.2), 0, 10)


def test_round_trip(rng):
    for _ in range(1000):
        w, h = rng.uniform(0.01, 1.0, size=2)
        cx, cy = rng.uniform(0, 1, size=2)
        b = BBoxN(cx, cy, w, h)
        fw, fh = rng.integers(1, 2000, size=2)
        back = to_normalized(to_absolute(b, fw, fh), fw, fh)
        np.testing.assert_allclose(back.as_array(), b.as_array(), atol=1e-9, rtol=0)


@pytest.mark.parametrize("bad", [(0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, -1), (1.2, 0.5, 0.1, 0.1)])
def test_bboxn_validation(bad):
    with pytest.raises(ValueError):
        BBoxN(*bad)


def test_bboxa_validation():
    with pytest.raises(ValueError):
        BBoxA(1, 0, 1, 2)


def test_iou_examples():
    a = BBoxA(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(BBoxA(0, 0, 1, 1), BBoxA(2, 2, 3, 3)) == 0.0
    assert iou(a, BBoxA(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_giou_examples():
    a = BBoxA(0, 0, 2, 2)
    assert giou(a, a) == 1.0
    assert giou(a, BBoxA(1, 1, 3, 3)) == pytest.approx(-5 / 63, abs=1e-12)
    assert giou(BBoxA(0, 0, 1, 1), BBoxA(2, 2, 3, 3)) == pytest.approx(-7 / 9, abs=1e-12)


def _int_box(rng):
    x0, x1 = sorted(rng.choice(12, 2, replace=False))
    y0, y1 = sorted(rng.choice(12, 2, replace=False))
    return np.array([x0, y0, x1, y1], dtype=float)


def test_iou_against_rasterization(rng):
    for _ in range(50):
        a, b = (_int_box(rng) for _ in range(2))
        assert iou(BBoxA(*a), BBoxA(*b)) == pytest.approx(raster_iou(a, b), abs=1e-12)


def test_giou_properties(rng):
    pairs = random_box_pairs(rng, 2000)
    for a, b in pairs:
        A, B = BBoxA(*a), BBoxA(*b)
        g, i = giou(A, B), iou(A, B)
        assert g <= i + 1e-15
        assert -1 < g <= 1
        assert giou(A, B) == giou(B, A)
        assert iou(A, B) == iou(B, A)


def test_giou_equals_iou_when_nested():
    outer, inner = BBoxA(0, 0, 10, 10), BBoxA(2, 3, 5, 7)
    assert giou(outer, inner) == iou(outer, inner)


def test_giou_one_only_for_identical():
    assert giou(BBoxA(0, 0, 1, 1), BBoxA(0, 0, 1, 1.000001)) < 1


def test_box_loss_examples():
    gt = BBoxN(0.5, 0.5, 0.2, 0.2)
    assert box_loss(gt, gt, 5, 2) == 0.0
    assert box_loss(gt, BBoxN(0.6, 0.5, 0.2, 0.2), 1, 0) == pytest.approx(0.1, abs=1e-12)
    assert box_loss(gt, BBoxN(0.5, 0.5, 0.4, 0.4), 5, 2) == pytest.approx(3.5, abs=1e-12)


def test_box_loss_positive_off_target(rng):
    for _ in range(100):
        a = BBoxN(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2))
        b = BBoxN(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.3, 2))
        assert box_loss(a, b, 5, 2) > 0
        assert box_loss(a, b, 0, 1) > 0


def test_box_loss_rejects_negative_weights():
    b = BBoxN(0.5, 0.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        box_loss(b, b, -1, 1)


def test_pairwise_arrays_match_scalar(rng):
    a = random_box_pairs(rng, 6)[:, 0]
    b = random_box_pairs(rng, 4)[:, 1]
    I = pairwise_iou_array(a, b)
    G = pairwise_giou_array(a, b)
    for i in range(6):
        for j in range(4):
            assert I[i, j] == pytest.approx(iou(BBoxA(*a[i]), BBoxA(*b[j])), abs=1e-12)
            assert G[i, j] == pytest.approx(giou(BBoxA(*a[i]), BBoxA(*b[j])), abs=1e-12)


def test_format_conversions(rng):
    boxes = rng.uniform(0.1, 0.9, size=(20, 4))
    np.testing.assert_allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(boxes)), boxes, atol=1e-12)


def test_clamp_degenerate_sides():
    out = clamp_cxcywh(np.array([[0.5, 0.5, 0.0, -0.2]]))
    assert out[0, 2] == out[0, 3] == 1e-4
    assert math.isfinite(pairwise_giou_array(cxcywh_to_xyxy(out), cxcywh_to_xyxy(out))[0, 0])
