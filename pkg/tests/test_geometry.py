import numpy as np
import pytest
from hypothesis import given, strategies as st

from backdoorlab.geometry import BoundingBox, iou, iou_matrix, metric_match, penalty_match

from conftest import box, gt, pred


def raster_iou(a, b, scale=1000):
    """Pixel-counting IoU on a grid ``scale`` cells per unit (exact for integer boxes)."""
    def mask(bb, lo, hi):
        xs = (np.arange(lo * scale, hi * scale) + 0.5) / scale
        inx = (xs >= bb[0]) & (xs < bb[2])
        iny = (xs >= bb[1]) & (xs < bb[3])
        return np.outer(iny, inx)
    lo = int(np.floor(min(a[0], a[1], b[0], b[1])))
    hi = int(np.ceil(max(a[2], a[3], b[2], b[3])))
    ma, mb = mask(a, lo, hi), mask(b, lo, hi)
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


class TestIoU:
    def test_identical(self):
        assert iou(box(0, 0, 1, 1), box(0, 0, 1, 1)) == 1.0

    def test_disjoint(self):
        assert iou(box(0, 0, 1, 1), box(5, 5, 6, 6)) == 0.0

    def test_offset_squares(self):
        assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_offset_squares_raster_oracle(self):
        assert raster_iou((0, 0, 2, 2), (1, 1, 3, 3), scale=1000) == pytest.approx(1 / 7, abs=1e-12)

    def test_degenerate_never_overlaps(self):
        d = box(1, 1, 1, 1)
        assert iou(d, d) == 0.0
        assert iou(d, box(0, 0, 2, 2)) == 0.0
        assert iou(box(0, 0, 0, 5), box(0, 0, 0, 5)) == 0.0

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(2, 0, 1, 1)

    def test_touching_edges(self):
        assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0


coord = st.integers(0, 12)


@st.composite
def int_boxes(draw):
    x1, x2 = sorted((draw(coord), draw(coord)))
    y1, y2 = sorted((draw(coord), draw(coord)))
    return (x1, y1, x2, y2)


real = st.floats(-50, 50, allow_nan=False)


@st.composite
def real_boxes(draw):
    x1, x2 = sorted((draw(real), draw(real)))
    y1, y2 = sorted((draw(real), draw(real)))
    return BoundingBox(x1, y1, x2, y2)


@given(int_boxes(), int_boxes())
def test_iou_matches_raster_count(a, b):
    assert iou(box(*a), box(*b)) == pytest.approx(raster_iou(a, b, scale=4), abs=1e-12)


@given(real_boxes(), real_boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(real_boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == (1.0 if a.area > 0 else 0.0)


@given(st.lists(real_boxes(), min_size=1, max_size=5), st.lists(real_boxes(), min_size=1, max_size=5))
def test_iou_matrix_agrees_with_scalar(aa, bb):
    m = iou_matrix(np.array([a.as_list() for a in aa]), np.array([b.as_list() for b in bb]))
    for i, a in enumerate(aa):
        for j, b in enumerate(bb):
            assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


class TestPenaltyMatch:
    def test_no_poisoned_objects(self):
        assert len(penalty_match([pred((0, 0, 10, 10))], [gt((0, 0, 10, 10))], 0.5)) == 0

    def test_multi_match_retained(self):
        g = gt((0, 0, 10, 10), poisoned=True)
        p1, p2 = pred((0, 0, 10, 9)), pred((0, 1, 10, 10))
        assert iou(p1.box, g.box) == pytest.approx(0.9)
        assert penalty_match([p1, p2], [g], 0.5).pairs == [(0, 0), (0, 1)]

    def test_gate_is_strict(self):
        g = gt((0, 0, 10, 10), poisoned=True)
        p = pred((0, 0, 10, 5))
        assert iou(p.box, g.box) == 0.5
        assert len(penalty_match([p], [g], 0.5)) == 0
        assert len(penalty_match([p], [g], 0.4999)) == 1

    def test_rho_range(self):
        with pytest.raises(ValueError):
            penalty_match([], [], 1.0)

    def test_empty_inputs(self):
        assert penalty_match([], [], 0.5).pairs == []


@given(st.lists(real_boxes(), max_size=5), st.lists(real_boxes(), max_size=4),
       st.lists(st.booleans(), min_size=4, max_size=4), st.randoms(use_true_random=False))
def test_penalty_match_order_invariant(pb, gb, flags, rnd):
    preds = [pred(b.as_list()) for b in pb]
    gts = [gt(b.as_list(), poisoned=f) for b, f in zip(gb, flags)]
    base = {(id(gts[i]), id(preds[j])) for i, j in penalty_match(preds, gts, 0.3)}
    rnd.shuffle(preds)
    rnd.shuffle(gts)
    res = penalty_match(preds, gts, 0.3)
    assert {(id(gts[i]), id(preds[j])) for i, j in res} == base
    assert res.pairs == sorted(res.pairs)
    for i, j in res:
        assert gts[i].poisoned and iou(preds[j].box, gts[i].box) > 0.3


class TestMetricMatch:
    def test_perfect_overlap(self):
        assert metric_match([pred((0, 0, 5, 5), (3, 0, 0))], [gt((0, 0, 5, 5))], 0.5) == {0: 0}

    def test_one_to_one(self):
        preds = [pred((0, 0, 5, 5), (1, 0, 0), score=0.6), pred((0, 0, 5, 5), (2, 0, 0), score=0.9)]
        assert metric_match(preds, [gt((0, 0, 5, 5))], 0.5) == {1: 0}

    def test_class_gated(self):
        assert metric_match([pred((0, 0, 5, 5), (0, 3, 0))], [gt((0, 0, 5, 5), label=1)], 0.5) == {}

    def test_threshold_inclusive(self):
        assert metric_match([pred((0, 0, 10, 5), (1, 0, 0))], [gt((0, 0, 10, 10))], 0.5) == {0: 0}

    def test_tie_goes_to_lower_gt(self):
        g = [gt((0, 0, 10, 10)), gt((0, 0, 10, 10))]
        assert metric_match([pred((0, 0, 10, 10), (1, 0, 0))], g, 0.5) == {0: 0}

    def test_highest_iou_wins(self):
        g = [gt((0, 0, 10, 8)), gt((0, 0, 10, 10))]
        assert metric_match([pred((0, 0, 10, 10), (1, 0, 0))], g, 0.5) == {0: 1}


@given(st.lists(real_boxes(), max_size=6), st.lists(real_boxes(), max_size=6), st.data())
def test_metric_match_is_one_to_one(pb, gb, data):
    labels = st.integers(1, 2)
    preds = [pred(b.as_list(), score=data.draw(st.floats(0, 1)), label=data.draw(labels)) for b in pb]
    gts = [gt(b.as_list(), label=data.draw(labels)) for b in gb]
    m = metric_match(preds, gts, 0.3)
    assert len(set(m.values())) == len(m)
    for j, i in m.items():
        assert preds[j].label == gts[i].original_label
        assert iou(preds[j].box, gts[i].box) >= 0.3
