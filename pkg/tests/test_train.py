import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railrow.data import generate_synthetic
from railrow.exceptions import NumericError, ValidationError
from railrow.grid import RailAnnotation, RailPolyline, RowAnchorGrid, anchor_points, encode
from railrow.model import ModelSpec, RowNet
from railrow.nn import save_checkpoint
from railrow.train import (
    AffineParams,
    TrainConfig,
    augment,
    preprocess,
    sample_affine,
    train,
    transform_annotation,
    transform_points,
    warp_image,
)

GRID = RowAnchorGrid(32, 64, (10.0, 16.0, 22.0, 28.0), 16, 2)
SPEC = ModelSpec(32, 64, 1, ((4, 3, 2), (8, 3, 2)), 2, 16, GRID)


def _ann(size=(96, 256)):
    H, W = size
    rails = [RailPolyline(1, [(W * 0.3, H - 1.0), (W * 0.45, H * 0.2)]),
             RailPolyline(2, [(W * 0.7, H - 1.0), (W * 0.55, H * 0.2)])]
    return RailAnnotation(rails, {"sun"}, size)


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate_synthetic(12, grid=GRID, seed=1)
    return ds.images, ds.annotations


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(rotation=-1)
    assert TrainConfig().base_lr == 4e-4


def test_preprocess_shape_and_dtype():
    x = preprocess(np.zeros((3, 8, 8), np.uint8))
    assert x.shape == (3, 1, 8, 8) and x.dtype == np.float32
    assert np.allclose(x, -2.0)


def test_identity_transform_is_noop(rng):
    img = rng.integers(0, 256, (96, 256)).astype(np.uint8)
    a = _ann()
    assert np.array_equal(warp_image(img, AffineParams()), img)
    assert transform_annotation(a, AffineParams()) == a


def test_horizontal_shift_moves_vertices():
    a = _ann()
    b = transform_annotation(a, AffineParams(tx=10.0))
    for r0, r1 in zip(a.rails, b.rails):
        assert np.allclose(r1.xs, r0.xs + 10.0)
        assert np.allclose(r1.ys, r0.ys)


def test_horizontal_shift_moves_image():
    img = np.zeros((20, 40), np.uint8)
    img[:, 10] = 200
    out = warp_image(img, AffineParams(tx=5.0))
    assert np.all(out[:, 15] == 200) and np.all(out[:, 10] == 0)


@given(st.floats(-6, 6), st.floats(-25, 25), st.floats(-9, 9))
def test_property_inverse_recovers_vertices(angle, tx, ty):
    p = AffineParams(angle, tx, ty)
    pts = np.random.default_rng(0).uniform(0, 256, (10, 2))
    back = transform_points(transform_points(pts, p, 256, 96), p.inverse(), 256, 96)
    assert np.max(np.abs(back - pts)) < 1e-6


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_property_augment_label_consistency(seed):
    """Anchor points of the augmented annotation map back onto the source rails."""
    grid = RowAnchorGrid.desk()
    a = _ann()
    img = np.zeros((96, 256), np.uint8)
    rng = np.random.default_rng(seed)
    params = sample_affine(np.random.default_rng(seed), 256, 96)
    _, b = augment(img, a, rng)
    assert encode(b, grid).tolist() == encode(transform_annotation(a, params), grid).tolist()
    pts = anchor_points(b, grid)
    inv = params.inverse()
    for slot, rail in enumerate(a.sorted_rails()):
        if slot >= len(b.rails):
            break
        for j, y in enumerate(grid.anchors):
            if np.isnan(pts[slot, j]):
                continue
            x0, y0 = transform_points([[pts[slot, j], y]], inv, 256, 96)[0]
            assert abs(rail.x_at(y0) - x0) < 1e-6


def test_augment_drops_rails_leaving_frame():
    a = _ann()
    b = transform_annotation(a, AffineParams(tx=-200.0))
    assert len(b.rails) < len(a.rails)


def test_zero_epochs_keeps_initialization(tiny_data, tmp_path):
    images, anns = tiny_data
    net = RowNet(SPEC, seed=0)
    before = {k: v.copy() for k, v in net.store.params.items()}
    res = train(net, images, anns, GRID, TrainConfig(epochs=0))
    assert res.trace == []
    assert all(np.array_equal(before[k], v) for k, v in net.store.params.items())


def test_training_reduces_loss(tiny_data):
    images, anns = tiny_data
    net = RowNet(SPEC, seed=0)
    res = train(net, images, anns, GRID, TrainConfig(epochs=15, batch_size=4, base_lr=3e-3,
                                                      augment=False))
    losses = [r["loss"] for r in res.trace]
    assert losses[-1] < 0.5 * losses[0]


def test_training_is_bitwise_deterministic(tiny_data, tmp_path):
    images, anns = tiny_data
    blobs = []
    for k in range(2):
        net = RowNet(SPEC, seed=4)
        res = train(net, images, anns, GRID, TrainConfig(epochs=2, batch_size=4, seed=9))
        save_checkpoint(tmp_path / f"{k}.ckpt", net.store)
        blobs.append(((tmp_path / f"{k}.ckpt").read_bytes(), repr(res.trace)))
    assert blobs[0] == blobs[1]


def test_trace_fields_and_csv(tiny_data, tmp_path):
    images, anns = tiny_data
    net = RowNet(SPEC, seed=0)
    res = train(net, images, anns, GRID, TrainConfig(epochs=2, batch_size=8),
                val=(images[:4], anns[:4]))
    res.write_trace(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,lr,loss,train_acc,val_acc"
    assert len(lines) == 3
    assert res.trace[-1]["step"] == 4 and not np.isnan(res.trace[-1]["val_acc"])


def test_nan_loss_aborts_with_diagnostic(tiny_data):
    images, anns = tiny_data
    net = RowNet(SPEC, seed=0)
    net.store.params["head.fc2.bias"][:] = np.nan
    with pytest.raises(NumericError, match="step 0"):
        train(net, images, anns, GRID, TrainConfig(epochs=1, batch_size=4))


def test_rejects_mismatched_inputs(tiny_data):
    images, anns = tiny_data
    with pytest.raises(ValidationError):
        train(RowNet(SPEC), images, anns[:-1], GRID, TrainConfig(epochs=1))
