import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railrow.data import generate_synthetic, split_indices
from railrow.evaluate import (
    BenchReport,
    accuracy,
    bench,
    cross_scene_matrix,
    dense_variant,
    fingerprint,
    gridding_sweep,
    matrix_rows,
    rescale_points,
    scaled_threshold,
    threshold_sweep,
    top1_accuracy,
)
from railrow.exceptions import ValidationError
from railrow.grid import RowAnchorGrid
from railrow.model import ModelSpec, RowNet
from railrow.train import TrainConfig


def recount(pred, gt, t):
    correct = total = 0
    for idx in np.ndindex(gt.shape):
        if np.isnan(gt[idx]):
            continue
        total += 1
        if not np.isnan(pred[idx]) and abs(pred[idx] - gt[idx]) <= t:
            correct += 1
    return correct, total


def random_instance(rng, n=3, c=2, h=5, p_missing=0.3):
    gt = rng.uniform(0, 256, (n, c, h))
    gt[rng.random(gt.shape) < p_missing] = np.nan
    gt.flat[0] = 10.0
    pred = gt + rng.normal(0, 4, gt.shape)
    pred[rng.random(gt.shape) < p_missing] = np.nan
    pred[np.isnan(gt) & (rng.random(gt.shape) < 0.5)] = 5.0
    return pred, gt


def test_two_of_three():
    gt = np.array([[[100.0, 100.0, 100.0]]])
    pred = gt + np.array([0.0, 5.0, 7.0])
    rep = accuracy(pred, gt, 6.0)
    assert rep.accuracy == pytest.approx(2 / 3) and (rep.correct, rep.total) == (2, 3)
    assert accuracy(gt, gt, 0.0).accuracy == 1.0


def test_false_positives_do_not_change_accuracy():
    gt = np.array([[[100.0, np.nan]]])
    rep = accuracy(np.array([[[100.0, 50.0]]]), gt, 1.0)
    assert rep.accuracy == 1.0 and rep.false_positives == 1 and rep.total == 1


def test_empty_ground_truth_is_error():
    with pytest.raises(ValidationError):
        accuracy(np.zeros((1, 1, 2)), np.full((1, 1, 2), np.nan), 6)
    with pytest.raises(ValidationError):
        accuracy(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)), 6)


@settings(max_examples=80)
@given(st.integers(0, 100_000), st.floats(0, 20))
def test_property_matches_recount_oracle(seed, t):
    pred, gt = random_instance(np.random.default_rng(seed))
    rep = accuracy(pred, gt, t)
    assert (rep.correct, rep.total) == recount(pred, gt, t)


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_property_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_instance(rng, n=6)
    perm = rng.permutation(6)
    assert accuracy(pred, gt, 6).accuracy == accuracy(pred[perm], gt[perm], 6).accuracy


@settings(max_examples=40)
@given(st.integers(0, 100_000), st.lists(st.floats(0, 30), min_size=2, max_size=8))
def test_property_sweep_monotone(seed, ts):
    pred, gt = random_instance(np.random.default_rng(seed))
    curve = threshold_sweep(pred, gt, sorted(ts))
    accs = [a for _, a in curve]
    assert all(a <= b for a, b in zip(accs, accs[1:]))


def test_sweep_endpoints_and_duplicates(rng):
    pred, gt = random_instance(rng)
    pred.flat[0] = gt.flat[0]
    curve = threshold_sweep(pred, gt, [0, 3, 3, np.inf])
    present = (~np.isnan(gt) & ~np.isnan(pred)).sum() / (~np.isnan(gt)).sum()
    exact = ((pred == gt) & ~np.isnan(gt)).sum() / (~np.isnan(gt)).sum()
    assert curve[0][1] == exact and curve[-1][1] == pytest.approx(present)
    assert curve[1][1] == curve[2][1]


@settings(max_examples=40)
@given(st.floats(-5, 5), st.floats(0.5, 8))
def test_property_rescale_scales_errors(offset, s):
    gt = np.array([[[100.0, 30.0, np.nan]]])
    pred = gt + offset
    err = np.abs(rescale_points(pred, s) - rescale_points(gt, s))
    assert np.allclose(err[~np.isnan(err)], abs(offset) * s)
    assert np.isnan(rescale_points(gt, s)[0, 0, 2])


def test_scaled_threshold():
    assert scaled_threshold(1280) == 6.0
    assert scaled_threshold(256) == pytest.approx(1.2)


def test_per_scene_totals_cover_overall(rng):
    pred, gt = random_instance(rng, n=4)
    tags = [{"sun", "line"}, {"night", "curve"}, {"sun", "cross"}, {"rain", "line"}]
    rep = accuracy(pred, gt, 6, tags)
    assert sum(t for _, _, t in rep.per_scene.values()) >= rep.total
    assert all(0 <= a <= 1 for a, _, _ in rep.per_scene.values())
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert rows[0]["scope"] == "total" and int(rows[0]["total"]) == rep.total
    assert "false positives" in rep.to_text()


def test_top1_over_rail_cells():
    grid = RowAnchorGrid(8, 8, (1.0, 5.0), 4, 1)
    targets = np.array([[0, 4]])
    logits = np.zeros((1, 2, 5))
    logits[0, 0, 0] = 1
    logits[0, 1, 2] = 1
    assert top1_accuracy(logits, targets, grid) == 1.0


def test_bench_contract():
    rep = bench(lambda x: x.sum(), (1, 1, 8, 8), warmup=2, runs=30)
    assert isinstance(rep, BenchReport)
    assert rep.runs == 30 and rep.fps == pytest.approx(1 / rep.mean_latency)
    assert rep.std_latency >= 0
    assert rep.fingerprint == bench(lambda x: x, (1, 1, 8, 8), 2, 30).fingerprint
    with pytest.raises(ValidationError):
        bench(lambda x: x, (1,), runs=0)


def test_fingerprint_stable_and_sensitive():
    assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
    assert len(fingerprint({})) == 16


def test_dense_variant_output():
    spec = dense_variant(ModelSpec())
    assert spec.output_shape == (4, 96, 256)
    out = RowNet(spec).forward(np.zeros((1, 1, 96, 256)))
    assert out.shape == (1, 4, 96, 256)


GRID = RowAnchorGrid(32, 64, (10.0, 16.0, 22.0, 28.0), 16, 2)
SPEC = ModelSpec(32, 64, 1, ((4, 3, 2), (8, 3, 2)), 2, 16, GRID)


@pytest.fixture(scope="module")
def small_set():
    return generate_synthetic(24, {"sun": 0.5, "night": 0.5, "rain": 0.0}, grid=GRID, seed=3)


def test_gridding_sweep_rows(small_set):
    tr, va = split_indices(len(small_set))
    cfg = TrainConfig(epochs=1, batch_size=8)
    rows = gridding_sweep(small_set, tr, va, widths=(8,), spec=SPEC, config=cfg)
    assert len(rows) == 1 and rows[0]["w"] == 8
    assert 0 <= rows[0]["top1"] <= 1 and 0 <= rows[0]["accuracy"] <= 1


def test_cross_scene_shape_and_consistency(small_set):
    tr, va = split_indices(len(small_set))
    cfg = TrainConfig(epochs=1, batch_size=8)
    m = cross_scene_matrix(small_set, ["sun", "night"], tr, va, spec=SPEC, config=cfg)
    assert list(m) == ["sun", "night", "total"]
    assert all(list(r) == ["sun", "night"] for r in m.values())
    again = cross_scene_matrix(small_set, ["sun", "night"], tr, va, spec=SPEC, config=cfg)
    assert m == again
    rows = matrix_rows(m)
    assert rows[0] == ["train\\test", "sun", "night", "mean"] and len(rows) == 4
    with pytest.raises(ValidationError):
        cross_scene_matrix(small_set, ["fog"], tr, va, spec=SPEC, config=cfg)
