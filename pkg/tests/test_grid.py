import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from railrow.exceptions import (
    DuplicateOrderError,
    NonMonotonePolylineError,
    UnknownSceneTagError,
    ValidationError,
)
from railrow.grid import (
    RailAnnotation,
    RailPolyline,
    RowAnchorGrid,
    anchor_points,
    clip_polyline,
    column_to_pixel,
    decode,
    encode,
    monotone_run,
    one_hot_logits,
    pixel_to_column,
    reduction_ratio,
    softmax_expectation,
    targets_to_points,
)

PAPER = RowAnchorGrid.paper()


def vertical(x, order=1, y0=0.0, y1=719.0):
    return RailPolyline(order, [(x, y0), (x, y1)])


def ann(*rails, size=(720, 1280), tags=()):
    return RailAnnotation(rails, frozenset(tags), size)


# -- grid construction --------------------------------------------------------

def test_paper_grid_constants():
    assert PAPER.num_anchors == 52
    assert PAPER.anchor_rows[0] == 200 and PAPER.anchor_rows[-1] == 710
    assert PAPER.num_classes == 201 and PAPER.background_class == 200
    assert PAPER.cell_width == pytest.approx(6.4)


def test_desk_grid():
    g = RowAnchorGrid.desk()
    assert (g.image_height, g.image_width, g.num_anchors, g.num_columns) == (96, 256, 26, 100)
    assert g.anchor_rows[0] == pytest.approx(200 * 96 / 720)


@pytest.mark.parametrize("kwargs", [
    dict(image_height=0), dict(num_columns=1), dict(num_rails=0), dict(anchor_rows=()),
    dict(anchor_rows=(10.0, 10.0)), dict(anchor_rows=(720.0,)),
])
def test_grid_validation(kwargs):
    base = dict(image_height=720, image_width=1280, anchor_rows=(200.0, 300.0), num_columns=200)
    base.update(kwargs)
    with pytest.raises(ValidationError):
        RowAnchorGrid(**base)


def test_grid_dict_round_trip():
    g = RowAnchorGrid.desk(50)
    assert RowAnchorGrid.from_dict(g.to_dict()) == g
    assert g.with_columns(25).num_columns == 25


# -- annotations --------------------------------------------------------------

def test_polyline_rejects_non_monotone():
    with pytest.raises(NonMonotonePolylineError):
        RailPolyline(1, [(0, 0), (1, 5), (2, 3)])
    with pytest.raises(ValidationError):
        RailPolyline(1, [(0, 0)])


def test_annotation_rejects_duplicates_and_unknown_tags():
    with pytest.raises(DuplicateOrderError):
        ann(vertical(10, 1), vertical(20, 1))
    with pytest.raises(UnknownSceneTagError):
        ann(vertical(10), tags=["snow"])


def test_x_at_interpolates_and_is_nan_outside():
    r = RailPolyline(1, [(100, 700), (200, 300)])
    assert r.x_at(500.0) == pytest.approx(150.0)
    assert np.isnan(r.x_at(200.0))


# -- pixel <-> column --------------------------------------------------------

def test_pixel_to_column_examples():
    # x=640 of 1280 at w=200 -> column 100
    assert pixel_to_column(640.0, PAPER) == 100
    assert pixel_to_column(0.0, PAPER) == 0
    assert pixel_to_column(1279.999, PAPER) == 199
    with pytest.raises(ValidationError):
        pixel_to_column(1280.0, PAPER)
    with pytest.raises(ValidationError):
        pixel_to_column(-0.1, PAPER)


def test_column_to_pixel_center():
    assert column_to_pixel(100, PAPER) == pytest.approx(643.2)


# -- encode / decode -----------------------------------------------------------

def test_encode_vertical_rail():
    t = encode(ann(vertical(640.0)), PAPER)
    assert t.shape == (4, 52)
    assert np.all(t[0] == 100)
    assert np.all(t[1:] == PAPER.background_class)


def test_encode_partial_span_is_background_outside():
    t = encode(ann(RailPolyline(1, [(640, 400), (640, 719)])), PAPER)
    rows = PAPER.anchors
    assert np.all(t[0][rows < 400] == 200)
    assert np.all(t[0][rows >= 400] == 100)


def test_encode_slots_follow_order_numbers():
    a = ann(vertical(100.0, 3), vertical(700.0, 1), vertical(900.0, 2))
    pts = anchor_points(a, PAPER)
    assert pts[0, 0] == 700 and pts[1, 0] == 900 and pts[2, 0] == 100
    assert np.all(np.isnan(pts[3]))


def test_encode_rejects_size_mismatch():
    with pytest.raises(ValidationError):
        encode(ann(vertical(10.0), size=(96, 256)), PAPER)


def test_decode_one_hot_recovers_cell_centers():
    a = ann(vertical(640.0), vertical(10.0, 2))
    t = encode(a, PAPER)
    pred = decode(one_hot_logits(t, PAPER), PAPER)
    assert np.array_equal(pred.present, t != 200)
    assert np.allclose(pred.x[pred.present], targets_to_points(t, PAPER)[pred.present])


def test_decode_presence_uses_full_argmax():
    logits = np.zeros((4, 52, 201))
    logits[..., 200] = 5.0
    logits[0, 0, 10] = 6.0
    pred = decode(logits, PAPER)
    assert pred.present.sum() == 1 and pred.present[0, 0]


def test_decode_shape_check():
    with pytest.raises(ValidationError):
        decode(np.zeros((4, 52, 200)), PAPER)


def test_softmax_expectation_uniform_and_delta():
    assert softmax_expectation(np.zeros(5)) == pytest.approx(2.0)
    z = np.full(5, -1e3)
    z[3] = 0
    assert softmax_expectation(z) == pytest.approx(3.0)


def test_softmax_expectation_two_neighbours():
    # equal mass on columns 4 and 5 -> 4.5
    z = np.full(10, -50.0)
    z[4] = z[5] = 10.0
    assert softmax_expectation(z) == pytest.approx(4.5, abs=1e-9)


def test_prediction_to_dict():
    t = encode(ann(vertical(640.0)), PAPER)
    d = decode(one_hot_logits(t, PAPER), PAPER).to_dict()
    assert len(d["rails"]) == 4
    assert len(d["rails"][0]["x"]) == 52 and d["rails"][1]["x"] == []


# -- reduction ratio ------------------------------------------------------------

def test_reduction_ratio_paper_value():
    r = reduction_ratio(288, 800, 52, 200)
    assert 22.0 <= r <= 22.1
    assert round(r, 2) == 22.04


def test_reduction_ratio_identity_and_errors():
    assert reduction_ratio(10, 21, 10, 20) == 1.0
    with pytest.raises(ValidationError):
        reduction_ratio(0, 800, 52, 200)


def test_reduction_ratio_halving_w_roughly_doubles():
    r1, r2 = reduction_ratio(288, 800, 52, 200), reduction_ratio(288, 800, 52, 100)
    assert r2 / r1 == pytest.approx(201 / 101)


# -- clipping helpers ---------------------------------------------------------

def test_clip_polyline_cuts_at_frame():
    out = clip_polyline([(-10, 0), (10, 20)], 100, 100)
    assert out[0][0] == pytest.approx(0.0) and out[0][1] == pytest.approx(10.0)
    assert out[-1] == (10.0, 20.0)


def test_clip_polyline_outside_is_empty():
    assert clip_polyline([(-10, 0), (-5, 20)], 100, 100) == []


def test_monotone_run():
    assert monotone_run([(0, 0), (0, 1), (0, 2), (0, 1)]) == [(0, 0), (0, 1), (0, 2)]


# -- properties ----------------------------------------------------------------

polyline_strategy = st.lists(
    st.tuples(st.floats(0, 1279.99), st.floats(0, 719.99)), min_size=2, max_size=6,
    unique_by=lambda p: round(p[1], 3),
).map(lambda pts: sorted(pts, key=lambda p: p[1])).filter(
    lambda pts: all(b[1] - a[1] > 1e-3 for a, b in zip(pts, pts[1:])))


@given(polyline_strategy)
def test_property_encode_decode_within_half_cell(pts):
    a = ann(RailPolyline(1, pts))
    t = encode(a, PAPER)
    gt = anchor_points(a, PAPER)
    pred = decode(one_hot_logits(t, PAPER), PAPER)
    assert np.array_equal(pred.present, ~np.isnan(gt))
    m = pred.present
    assert np.all(np.abs(pred.x[m] - gt[m]) <= PAPER.cell_width / 2 + 1e-9)


@given(st.floats(0, 1279.999), st.integers(2, 400))
def test_property_column_contains_pixel(x, w):
    g = PAPER.with_columns(w)
    k = pixel_to_column(x, g)
    assert 0 <= k < w
    assert abs(column_to_pixel(k, g) - x) <= g.cell_width / 2 + 1e-9


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40))
def test_property_expectation_within_range(z):
    e = softmax_expectation(np.asarray(z))
    assert 0 <= e <= len(z) - 1


def test_codec_round_trip_acceptance_size():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    for _ in range(1000):
        n = rng.integers(2, 7)
        ys = np.sort(rng.uniform(0, 719.99, n))
        if np.any(np.diff(ys) <= 1e-6):
            continue
        xs = rng.uniform(0, 1279.99, n)
        a = ann(RailPolyline(1, list(zip(xs, ys))))
        gt = anchor_points(a, PAPER)
        pred = decode(one_hot_logits(encode(a, PAPER), PAPER), PAPER)
        assert np.array_equal(pred.present, ~np.isnan(gt))
        assert np.all(np.abs(pred.x[pred.present] - gt[pred.present]) <= 3.2 + 1e-9)
    assert time.perf_counter() - t0 < 5.0
