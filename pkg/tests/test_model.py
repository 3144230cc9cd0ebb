"""Encoder, pixel alignment, shared decoder, fused prediction."""

import numpy as np
import pytest

from occadapt import autodiff as ad
from occadapt.geometry import make_biped, make_icosphere
from occadapt.model import OccupancyModel, _sigmoid_np
from occadapt.raster import RasterInput, rasterize


@pytest.fixture(scope="module")
def raster64():
    return rasterize(make_icosphere(0.4, subdivisions=2), 64)


def small_model(**kw):
    kw.setdefault("channels", 4)
    kw.setdefault("resolution", 16)
    kw.setdefault("hidden", (8, 6))
    return OccupancyModel(**kw)


def small_raster():
    return rasterize(make_icosphere(0.4, subdivisions=1), 16)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def test_encode_level_shapes(raster64):
    model = OccupancyModel(channels=16, levels=4, resolution=64)
    stack = model.encode(raster64)
    assert len(stack) == 4
    for level in stack:
        assert level.shape == (16, 32, 32)


def test_encode_finite_at_init(raster64):
    model = OccupancyModel(resolution=64, seed=3)
    for level in model.encode(raster64):
        assert np.isfinite(level.data).all()


def test_encode_deterministic(raster64):
    model = OccupancyModel(resolution=64, seed=0)
    a = model.encode(raster64)
    b = model.encode(raster64)
    for la, lb in zip(a, b):
        np.testing.assert_array_equal(la.data, lb.data)


def test_encode_resolution_mismatch(raster64):
    model = OccupancyModel(resolution=32)
    with pytest.raises(ValueError, match="resolution"):
        model.encode(raster64)


# ---------------------------------------------------------------------------
# pixel_align
# ---------------------------------------------------------------------------

def test_pixel_align_depth_last_component():
    model = small_model()
    stack = model.encode(small_raster())
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 3))
    feats = model.pixel_align(stack, pts)
    assert len(feats) == model.levels
    for f in feats:
        assert f.shape == (20, model.channels + 1)
        np.testing.assert_allclose(f.data[:, -1], pts[:, 2] + 0.5, atol=1e-12)


def test_pixel_align_constant_grid():
    model = small_model()
    stack = model.encode(small_raster())
    # overwrite one level with a constant grid; samples must reproduce it
    const = ad.constant(np.full((model.channels, 8, 8), 3.25))
    stack[2] = const
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, size=(30, 3))
    feats = model.pixel_align(stack, pts)
    np.testing.assert_allclose(feats[2].data[:, :-1], 3.25, atol=1e-12)


def test_pixel_align_grid_center_exact():
    model = small_model()
    stack = model.encode(small_raster())
    g = stack[1].data
    # grid index (i, j) corresponds to x = ((i+0.5)*R/H)/R - 0.5
    h = g.shape[1]
    i, j = 3, 5
    x = (i + 0.5) / h - 0.5
    y = (j + 0.5) / h - 0.5
    feats = model.pixel_align(stack, np.array([[x, y, 0.1]]))
    np.testing.assert_allclose(feats[1].data[0, :-1], g[:, i, j], atol=1e-12)


def test_pixel_align_matches_direct_formula():
    model = small_model()
    stack = model.encode(small_raster())
    g = stack[0].data
    h = g.shape[1]
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.45, 0.45, size=(100, 3))
    feats = model.pixel_align(stack, pts)
    for p, f in zip(pts, feats[0].data):
        gu = np.clip((p[0] + 0.5) * h - 0.5, 0, h - 1)
        gv = np.clip((p[1] + 0.5) * h - 0.5, 0, h - 1)
        u0 = min(int(np.floor(gu)), h - 2)
        v0 = min(int(np.floor(gv)), h - 2)
        fu, fv = gu - u0, gv - v0
        expect = (g[:, u0, v0] * (1 - fu) * (1 - fv) + g[:, u0, v0 + 1] * (1 - fu) * fv
                  + g[:, u0 + 1, v0] * fu * (1 - fv) + g[:, u0 + 1, v0 + 1] * fu * fv)
        np.testing.assert_allclose(f[:-1], expect, atol=1e-12)


# ---------------------------------------------------------------------------
# decode / predict
# ---------------------------------------------------------------------------

def test_zero_decoder_outputs_half():
    model = small_model()
    for p in model.decoder_parameters():
        p.data = np.zeros_like(p.data)
    pts = np.random.default_rng(3).uniform(-0.5, 0.5, size=(10, 3))
    pred = model.predict(small_raster(), pts)
    np.testing.assert_allclose(pred.fused.data, 0.5, atol=1e-15)
    for layer in pred.per_layer:
        np.testing.assert_allclose(layer.data, 0.5, atol=1e-15)


def test_predict_in_unit_interval():
    model = small_model(seed=7)
    pts = np.random.default_rng(4).uniform(-0.5, 0.5, size=(50, 3))
    pred = model.predict(small_raster(), pts)
    assert np.all(pred.fused.data > 0) and np.all(pred.fused.data < 1)
    for layer in pred.per_layer:
        assert np.all(layer.data > 0) and np.all(layer.data < 1)


def test_fused_is_mean_of_layers():
    model = small_model(seed=1)
    pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(16, 3))
    pred = model.predict(small_raster(), pts)
    stacked = np.stack([l.data for l in pred.per_layer])
    np.testing.assert_allclose(pred.fused.data, stacked.mean(axis=0), atol=1e-15)


def test_batched_equals_single(raster64):
    model = OccupancyModel(seed=2)
    rng = np.random.default_rng(6)
    pts = rng.uniform(-0.5, 0.5, size=(32, 3))
    batched = model.predict(raster64, pts).fused.data
    singles = np.array([model.predict(raster64, p[None]).fused.data[0] for p in pts])
    np.testing.assert_allclose(batched, singles, atol=1e-12)


def test_decoder_shared_across_layers():
    model = small_model(seed=4)
    pts = np.random.default_rng(7).uniform(-0.5, 0.5, size=(8, 3))
    raster = small_raster()
    before = model.predict(raster, pts)
    model.dec_b[-1].data = model.dec_b[-1].data + 0.5
    after = model.predict(raster, pts)
    for la, lb in zip(before.per_layer, after.per_layer):
        assert np.all(np.abs(la.data - lb.data) > 0), "decoder change must move every layer"


def test_use_levels_last():
    model = small_model(seed=5, use_levels="last")
    assert model.active_levels() == [model.levels - 1]
    pts = np.random.default_rng(8).uniform(-0.5, 0.5, size=(12, 3))
    pred = model.predict(small_raster(), pts)
    assert len(pred.per_layer) == 1
    np.testing.assert_allclose(pred.fused.data, pred.per_layer[0].data, atol=1e-15)
    # matches the last layer of the full model with identical weights
    full = small_model(seed=5)
    full_pred = full.predict(small_raster(), pts)
    np.testing.assert_allclose(pred.per_layer[0].data, full_pred.per_layer[-1].data,
                               atol=1e-12)


def test_use_levels_validation():
    with pytest.raises(ValueError, match="use_levels"):
        small_model(use_levels="first")


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_end_to_end_gradient_check():
    model = small_model(seed=0)
    raster = small_raster()
    pts = np.random.default_rng(9).uniform(-0.5, 0.5, size=(6, 3))
    target = np.random.default_rng(10).uniform(0, 1, size=6)

    def loss():
        pred = model.predict(raster, pts)
        diff = ad.sub(pred.fused, ad.constant(target))
        return ad.vmean(ad.mul(diff, diff))

    err = ad.grad_check(loss, model.parameters(), coords_per_param=6,
                        rng=np.random.default_rng(11))
    assert err < 1e-3


def test_frozen_decoder_excluded():
    model = small_model(freeze_decoder=True)
    names = {p.name for p in model.trainable_parameters()}
    assert all(n.startswith("enc") for n in names)
    assert len(model.trainable_parameters()) == 2 * model.levels
    full = {p.name for p in model.parameters()}
    assert any(n.startswith("dec") for n in full)


# ---------------------------------------------------------------------------
# graph-free inference path
# ---------------------------------------------------------------------------

def test_predict_np_matches_graph():
    model = small_model(seed=6)
    raster = small_raster()
    pts = np.random.default_rng(12).uniform(-0.5, 0.5, size=(200, 3))
    grids = model.features_np(raster)
    fast = model.predict_np(grids, pts, chunk=64)
    graph = model.predict(raster, pts).fused.data
    np.testing.assert_array_equal(fast, graph)


def test_predict_np_chunking_invariant():
    model = small_model(seed=8)
    raster = small_raster()
    pts = np.random.default_rng(13).uniform(-0.5, 0.5, size=(150, 3))
    grids = model.features_np(raster)
    a = model.predict_np(grids, pts, chunk=7)
    b = model.predict_np(grids, pts, chunk=1000)
    np.testing.assert_array_equal(a, b)


def test_sigmoid_np_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = _sigmoid_np(x)
    assert np.isfinite(s).all()
    assert s[2] == 0.5
    assert np.all(s >= 0) and np.all(s <= 1)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    model = small_model(seed=9)
    path = tmp_path / "model.ckpt"
    model.save(path)
    other = small_model(seed=99)
    pts = np.random.default_rng(14).uniform(-0.5, 0.5, size=(10, 3))
    raster = small_raster()
    assert not np.allclose(other.predict(raster, pts).fused.data,
                           model.predict(raster, pts).fused.data)
    other.load(path)
    np.testing.assert_array_equal(other.predict(raster, pts).fused.data,
                                  model.predict(raster, pts).fused.data)


def test_checkpoint_shape_mismatch(tmp_path):
    model = small_model(seed=0)
    path = tmp_path / "model.ckpt"
    model.save(path)
    bigger = small_model(channels=6)
    with pytest.raises(ValueError, match="shape"):
        bigger.load(path)


def test_checkpoint_missing_param(tmp_path):
    model = small_model()
    path = tmp_path / "partial.ckpt"
    ad.save_params(path, model.parameters()[:3])
    with pytest.raises(ValueError, match="missing"):
        model.load(path)


def test_model_validation():
    with pytest.raises(ValueError, match="levels"):
        OccupancyModel(levels=0)
    with pytest.raises(ValueError, match="even"):
        OccupancyModel(resolution=33)
