import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import MultiPoint, Point

from evseg.events import EventStream, SensorGeometry, slice_windows
from evseg.metrics import (
    ConfusionCounts,
    DetectionBox,
    SegMask,
    confusion,
    convex_hull,
    detection_rate,
    detection_success,
    evaluate_windows,
    hull_mask,
    iou,
    match_detections,
    scores,
)

GEO64 = SensorGeometry(64, 64)


def truncate(v, places=1):
    return math.floor(v * 10**places) / 10**places


# -- scores ---------------------------------------------------------------------


def test_table_one_scores_printed_digits():
    # the printed figures are the computed values cut (not rounded) to one decimal
    a = scores(ConfusionCounts(tp=97681, fp=96816, fn=58823, tn=2216680))
    b = scores(ConfusionCounts(tp=82264, fp=145343, fn=74248, tn=2168062))
    assert (truncate(100 * a["f1"]), truncate(100 * a["recall"])) == (55.6, 62.4)
    assert (truncate(100 * b["f1"]), truncate(100 * b["recall"])) == (42.8, 52.5)


def test_table_one_raw_values():
    # direct evaluation of the defining ratios
    a = scores(ConfusionCounts(tp=97681, fp=96816, fn=58823, tn=2216680))
    r, p = 97681 / (97681 + 58823), 97681 / (97681 + 96816)
    assert a["recall"] == r and a["precision"] == p
    assert a["f1"] == pytest.approx(2 * p * r / (p + r), rel=1e-15)


def test_perfect_and_empty_scores():
    assert scores(ConfusionCounts(tp=5, tn=3)) == {"recall": 1.0, "precision": 1.0, "f1": 1.0}
    assert scores(ConfusionCounts(tn=9)) == {"recall": 0.0, "precision": 0.0, "f1": 0.0}


def test_confusion_counts_total():
    c = confusion(np.array([1, 1, 0, 0, 1]), np.array([1, 0, 0, 1, 1]))
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)
    assert c.total == 5
    with pytest.raises(ValueError):
        confusion(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


# -- hull masks -------------------------------------------------------------------


def _orient(a, b, px, py):
    return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])


def oracle_hull_mask(points, geo):
    """Brute force: a pixel center is in the hull iff it lies in some triangle of input points."""
    pts = [tuple(map(int, p)) for p in {tuple(p) for p in np.asarray(points).tolist()}]
    ys, xs = np.mgrid[0 : geo.height, 0 : geo.width]
    mask = np.zeros((geo.height, geo.width), dtype=bool)
    noncollinear = False
    for a, b, c in combinations(pts, 3):
        if _orient(a, b, *c) == 0:
            continue
        noncollinear = True
        d1, d2, d3 = _orient(a, b, xs, ys), _orient(b, c, xs, ys), _orient(c, a, xs, ys)
        mask |= ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
    if noncollinear:
        return mask
    # all points on one line: the pixels within half a pixel of the spanned segment
    for a, b in combinations(pts, 2) if len(pts) > 1 else [(pts[0], pts[0])]:
        ab = np.subtract(b, a, dtype=float)
        den = float(ab @ ab) or 1.0
        t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / den, 0, 1)
        mask |= (xs - a[0] - t * ab[0]) ** 2 + (ys - a[1] - t * ab[1]) ** 2 <= 0.25 + 1e-12
    return mask


def shapely_hull_mask(points, geo):
    hull = MultiPoint([tuple(map(float, p)) for p in points]).convex_hull
    out = np.zeros((geo.height, geo.width), dtype=bool)
    for y in range(geo.height):
        for x in range(geo.width):
            pt = Point(x, y)
            out[y, x] = hull.covers(pt) if hull.geom_type == "Polygon" else hull.distance(pt) <= 0.5
    return out


def test_square_hull_area():
    m = hull_mask(np.array([[0, 0], [0, 2], [2, 0], [2, 2]]), GEO64)
    assert m.area == 9 and m.bitmap[:3, :3].all()


def test_single_point_hull():
    m = hull_mask(np.array([[5, 7]]), GEO64)
    assert m.area == 1 and m.bitmap[7, 5]


def test_collinear_hull_is_column():
    m = hull_mask(np.array([[0, 0], [0, 4]]), GEO64)
    assert m.area == 5 and m.bitmap[:5, 0].all()


def test_empty_hull():
    assert hull_mask(np.zeros((0, 2)), GEO64).area == 0


def test_convex_hull_drops_collinear_vertices():
    h = convex_hull(np.array([[0, 0], [1, 0], [2, 0], [2, 2], [0, 2], [1, 1]]))
    assert sorted(map(tuple, h.tolist())) == [(0, 0), (0, 2), (2, 0), (2, 2)]


points_strategy = st.lists(
    st.tuples(st.integers(0, 63), st.integers(0, 63)), min_size=1, max_size=12
)


@settings(max_examples=60, deadline=None)
@given(points_strategy)
def test_hull_matches_orientation_oracle(points):
    pts = np.array(points)
    assert np.array_equal(hull_mask(pts, GEO64).bitmap, oracle_hull_mask(pts, GEO64))


@settings(max_examples=15, deadline=None)
@given(points_strategy)
def test_hull_matches_shapely(points):
    pts = np.array(points)
    assert np.array_equal(hull_mask(pts, GEO64).bitmap, shapely_hull_mask(pts, GEO64))


# -- IoU -------------------------------------------------------------------------


def _rect_mask(x0, y0, x1, y1, geo=GEO64):
    m = np.zeros((geo.height, geo.width), dtype=bool)
    m[y0 : y1 + 1, x0 : x1 + 1] = True
    return SegMask(m)


def test_iou_examples():
    sq = _rect_mask(0, 0, 2, 2)
    assert iou(sq, sq) == 1.0
    assert iou(sq, _rect_mask(10, 10, 12, 12)) == 0.0
    assert iou(sq, _rect_mask(0, 0, 1, 2)) == pytest.approx(6 / 9)
    empty = SegMask(np.zeros((64, 64), dtype=bool))
    assert iou(empty, empty) == 1.0 and iou(empty, sq) == 0.0
    with pytest.raises(ValueError):
        iou(sq, SegMask(np.zeros((4, 4), dtype=bool)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iou_symmetric_and_one_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = SegMask(rng.random((8, 8)) < 0.3)
    b = SegMask(a.bitmap.copy() if rng.random() < 0.3 else rng.random((8, 8)) < 0.3)
    assert iou(a, b) == iou(b, a)
    assert (iou(a, b) == 1.0) == np.array_equal(a.bitmap, b.bitmap)


# -- detection rate ----------------------------------------------------------------


def test_detection_examples():
    g = DetectionBox(0, 0, 9, 9)
    assert detection_success(g, g)
    assert not detection_success(DetectionBox(20, 20, 25, 25), g)
    # covers 60 of the 100 truth pixels but spans 1000 pixels
    big = DetectionBox(4, 0, 103, 9)
    assert big.intersection(g) == 60 and big.area == 1000
    assert not detection_success(big, g)


def test_detection_greedy_matching_by_id():
    gts = [DetectionBox(0, 0, 9, 9, 1), DetectionBox(20, 0, 29, 9, 2)]
    preds = [DetectionBox(20, 0, 29, 9, 2), DetectionBox(0, 0, 9, 9, 1)]
    assert match_detections(preds, gts) == [True, True]
    assert match_detections([DetectionBox(0, 0, 9, 9, 2)], gts) == [False, False]
    _, rate = detection_rate([(preds[:1], gts)])
    assert rate == 50.0


box_strategy = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(0, 20), st.integers(0, 20)).map(
    lambda t: DetectionBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@settings(max_examples=100, deadline=None)
@given(box_strategy, box_strategy, st.integers(-50, 50), st.integers(-50, 50))
def test_detection_translation_invariant(p, g, dx, dy):
    assert detection_success(p, g) == detection_success(p.shifted(dx, dy), g.shifted(dx, dy))


# -- window evaluation ---------------------------------------------------------------


def _stream():
    t = np.arange(0, 20_000, 100, dtype=np.int64)
    rng = np.random.default_rng(0)
    x = rng.integers(0, 32, len(t))
    y = rng.integers(0, 32, len(t))
    return EventStream(t, x, y, np.ones(len(t), dtype=np.int64))


def test_identity_evaluation():
    s = _stream()
    gt = ((s.x > 10) & (s.x < 20) & (s.y > 5) & (s.y < 15)).astype(np.int64)
    wins = slice_windows(s, 10_000, 5000)
    rep = evaluate_windows(s, wins, gt, gt, SensorGeometry(32, 32))
    summ = rep.summary()
    assert summ["mean_iou"] == 1.0 and summ["dr_percent"] == 100.0 and summ["f1"] == 1.0
    assert summ["windows"] == 2


def test_capped_out_events_are_scored():
    s = _stream()
    gt = (s.x < 16).astype(np.int64)
    wins = slice_windows(s, 20_000, 50)
    rep = evaluate_windows(s, wins, gt, gt, SensorGeometry(32, 32))
    assert rep.counts.total == len(s)


def test_csv_report_format():
    s = _stream()
    gt = (s.x < 16).astype(np.int64)
    rep = evaluate_windows(s, slice_windows(s, 10_000, 5000), gt, gt, SensorGeometry(32, 32))
    lines = rep.to_csv(("iou", "dr")).splitlines()
    assert lines[0] == "window_id,iou,dr_success,tp,fp,tn,fn"
    assert lines[1].startswith("0,1.000000,1/1,")
    assert lines[-1].startswith("# summary windows=2 mean_iou=1.000000")
    assert "f1=" not in lines[-1]
