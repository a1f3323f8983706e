import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repvsr import clipio
from repvsr import network as N
from repvsr import trainer as tr
from repvsr.checks import CHECKS
from repvsr.errors import DataError, ShapeError, TrainingDivergedError
from repvsr.synth import synth_dataset


def _cfg(**kw):
    base = dict(lr_peak=2e-3, warmup_epochs=1, total_epochs=3, lr_patch=4, hr_patch=16,
                batch_size=2, batches_per_epoch=2)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    hr, lr = synth_dataset(3, seed=5, frames=2, size=32)
    return tr.ClipDataset(hr, lr)


def test_l2_loss():
    x = np.random.default_rng(0).random((1, 3, 4, 4))
    assert tr.l2_loss(x, x)[0] == 0.0
    assert tr.l2_loss(x + 0.1, x)[0] == pytest.approx(0.01)
    with pytest.raises(ShapeError):
        tr.l2_loss(x, x[:, :2])
    assert CHECKS["l2_loss"]().passed


def test_objective():
    assert tr.objective(0.25, 123456, 0.0) == 0.25
    assert tr.objective(0.0, 2_000_000_000, 1.0) == 2.0
    assert tr.objective(0.1, 2e9, 0.01) < tr.objective(0.1, 3e9, 0.01)
    with pytest.raises(ValueError):
        tr.objective(0.1, 1, -1.0)


def test_lr_schedule_endpoints():
    cfg = tr.TrainConfig()
    assert tr.lr_at(cfg.warmup_epochs, cfg) == 5e-4
    assert tr.lr_at(cfg.total_epochs, cfg) == pytest.approx(1e-8, rel=1e-12)
    assert tr.lr_at(cfg.warmup_epochs / 2, cfg) == pytest.approx(2.5e-4)
    assert tr.lr_at(0, cfg) == 0.0
    for bad in (-1, cfg.total_epochs + 1):
        with pytest.raises(ValueError):
            tr.lr_at(bad, cfg)


@settings(max_examples=30, deadline=None)
@given(warm=st.integers(0, 50), extra=st.integers(1, 100))
def test_lr_schedule_piecewise_linear(warm, extra):
    cfg = tr.TrainConfig(warmup_epochs=warm, total_epochs=warm + extra)
    grid = np.union1d(np.linspace(0, cfg.total_epochs, 401), [warm])
    vals = np.array([tr.lr_at(e, cfg) for e in grid])
    assert vals.max() == pytest.approx(cfg.lr_peak, rel=1e-12)
    # continuity: no jump steeper than the steeper of the two slopes (plus
    # rounding slack for grid points that nearly coincide with the warmup end)
    slope = cfg.lr_peak * max(1 / max(warm, 1), 1 / extra)
    assert np.all(np.abs(np.diff(vals)) <= slope * np.diff(grid) * 1.0001 + 1e-12 * cfg.lr_peak)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_patch=24, hr_patch=90)
    with pytest.raises(ValueError):
        tr.TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"nope": 1})
    cfg = tr.TrainConfig.desk_scale(lam=0.01)
    assert (cfg.lr_patch, cfg.hr_patch, cfg.warmup_epochs, cfg.total_epochs) == (24, 96, 50, 500)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert tr.TrainConfig.from_json(path) == cfg
    assert json.loads(path.read_text())["lambda"] == 0.01
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DataError):
        tr.TrainConfig.from_json(tmp_path / "bad.json")


def test_adam_first_step_scalar_recurrence():
    lr, b1, b2, eps = 1e-3, 0.8, 0.95, 1e-8
    g, p0 = -0.37, 1.5
    params = {"w": np.array([p0])}
    state = tr.AdamState.zeros_like(params)
    # hand-rolled scalar recurrence
    m = v = 0.0
    p = p0
    for step in range(1, 4):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        params, state = tr.adam_step(params, {"w": np.array([g])}, state, lr, b1, b2, eps)
        if step == 1:
            assert p0 - params["w"][0] == pytest.approx(lr * g / (abs(g) + eps), rel=1e-12)
            assert p0 - params["w"][0] == pytest.approx(lr * np.sign(g), rel=1e-6)
        assert params["w"][0] == pytest.approx(p, rel=1e-14)
    assert state.t == 3


def test_adam_zero_grad_and_determinism():
    r = np.random.default_rng(0)
    params = {"a": r.standard_normal((2, 3)), "b": r.standard_normal(4)}
    state = tr.AdamState.zeros_like(params)
    out = params
    for _ in range(5):
        out, state = tr.adam_step(out, {k: np.zeros_like(v) for k, v in params.items()}, state, 1e-2)
    assert state.t == 5
    assert all(np.array_equal(out[k], params[k]) for k in params)
    grads = {k: r.standard_normal(v.shape) for k, v in params.items()}
    runs = [tr.adam_step(params, grads, tr.AdamState.zeros_like(params), 1e-3)[0] for _ in range(2)]
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in params)
    with pytest.raises(ShapeError):
        tr.adam_step(params, {"a": np.zeros(3)}, tr.AdamState.zeros_like(params), 1e-3)


def test_sample_patch_pair_alignment():
    cfg = _cfg()
    r = np.random.default_rng(0)
    hr = r.random((1, 6, 32, 40))
    lr = hr[:, :, ::4, ::4]
    for _ in range(20):
        lp, hp = tr.sample_patch_pair(lr, hr, cfg, r)
        assert lp.shape == (1, 6, 4, 4) and hp.shape == (1, 6, 16, 16)
        np.testing.assert_array_equal(hp[:, :, ::4, ::4], lp)
    with pytest.raises(ShapeError):
        tr.sample_patch_pair(lr[:, :, :3, :3], hr[:, :, :12, :12], cfg, r)
    with pytest.raises(ShapeError):
        tr.sample_patch_pair(lr, hr[:, :, :31], cfg, r)


def test_patch_bicubic_self_consistency():
    """Downscaling a sampled HR patch reproduces the LR patch away from the crop edge.

    The antialiased x4 kernel spans 16 HR pixels, so LR pixels within two of
    the crop border see HR context that the crop no longer contains.
    """
    hr, lr = synth_dataset(1, seed=3, frames=2, size=64, quantize=False)
    cfg = _cfg(lr_patch=10, hr_patch=40)
    r = np.random.default_rng(1)
    for _ in range(5):
        lp, hp = tr.sample_patch_pair(lr[0], hr[0], cfg, r)
        again = clipio.downscale(hp)
        assert np.abs(again - lp)[:, :, 2:-2, 2:-2].max() <= 1e-6


def test_sample_batch_shapes(tiny_data):
    lrb, hrb = tr.sample_batch(tiny_data, _cfg(batch_size=5), np.random.default_rng(0))
    assert lrb.shape == (5, 3, 4, 4) and hrb.shape == (5, 3, 16, 16)


def test_dataset_validation():
    with pytest.raises(DataError):
        tr.ClipDataset([np.zeros((1, 3, 8, 8))], [])
    with pytest.raises(DataError):
        tr.ClipDataset([np.zeros((1, 3, 8, 8))], [np.zeros((1, 3, 3, 2))])


def test_train_zero_lr_freezes(tiny_data):
    p = N.init_params(N.NetConfig(2, 1))
    result = tr.train(p, tiny_data, _cfg(lr_peak=0.0))
    before, after = p.to_arrays(), result.params.to_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert result.steps == 6


def test_train_deterministic_and_curve(tiny_data, tmp_path):
    p = N.init_params(N.NetConfig(2, 1))
    a = tr.train(p, tiny_data, _cfg(), val=tiny_data)
    b = tr.train(p, tiny_data, _cfg(), val=tiny_data)
    wa, wb = a.params.to_arrays(), b.params.to_arrays()
    assert all(wa[k].tobytes() == wb[k].tobytes() for k in wa)
    assert [r["epoch"] for r in a.curve] == [1, 2, 3]
    assert all(np.isfinite(r["val_psnr"]) for r in a.curve)
    path = tmp_path / "curve.csv"
    tr.write_curve_csv(a.curve, path)
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "val_psnr"] and len(rows) == 3


def test_small_step_does_not_increase_batch_loss(tiny_data):
    for seed in range(3):
        p = N.init_params(N.NetConfig(4, 1), seed=seed, dtype=np.float64)
        lrb, hrb = tr.sample_batch(tiny_data.astype(np.float64), _cfg(), np.random.default_rng(seed))
        loss, grads = tr.loss_and_grads(p, lrb, hrb)
        stepped = p.with_arrays({k: v - 1e-6 * grads[k] for k, v in p.to_arrays().items()})
        assert tr.loss_and_grads(stepped, lrb, hrb)[0] <= loss


def test_divergence_guard(tiny_data):
    p = N.init_params(N.NetConfig(2, 1))
    bad = p.with_arrays({k: (np.full_like(v, np.nan) if k == "head.bias" else v) for k, v in p.to_arrays().items()})
    with pytest.raises(TrainingDivergedError):
        tr.train(bad, tiny_data, _cfg())


def test_network_gradcheck():
    report = CHECKS["network"]()
    assert report.passed and report.max_error <= 1e-4


@pytest.mark.slow
def test_overfit_single_clip():
    # Edge-heavy clip; a width-8 network cannot out-fit bicubic on smooth
    # gradients within 500 steps, so the content is pinned.
    hr, lr = synth_dataset(1, seed=0, frames=2, size=64)
    data = tr.ClipDataset(hr, lr)
    cfg = tr.TrainConfig(lr_peak=3e-3, warmup_epochs=5, total_epochs=50, lr_patch=16, hr_patch=64,
                         batch_size=8, batches_per_epoch=10)
    result = tr.train(N.init_params(N.NetConfig(8, 1)), data, cfg)
    assert result.steps == 500
    _, psnr = tr.validate(result.params, data)
    assert psnr > tr.bicubic_baseline(data)
