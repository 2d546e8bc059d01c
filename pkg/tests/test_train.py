import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidganet.check import ohem_gradient_check
from bidganet.data import SegSample, synth_dataset
from bidganet.errors import ConfigError, DataError, NumericAbort, ShapeError
from bidganet.model import NetworkConfig, build_model, save_checkpoint
from bidganet.oracles import pixel_ce_direct
from bidganet.tensor import Tensor
from bidganet.train import (SGD, TrainConfig, cross_entropy, iters_for_epochs, lr_at, ohem_ce,
                            random_crop, sgd_step, train_loop)


def cfg(**kw):
    base = dict(total_iters=1000, warmup_iters=10, base_lr=0.01, poly_power=0.9)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_endpoints():
    c = cfg()
    assert lr_at(10, c) == 0.01
    assert lr_at(1000, c) == 0.0
    assert lr_at(0, c) == pytest.approx(0.001)


def test_lr_known_value():
    assert lr_at(505, cfg()) == pytest.approx(0.01 * (1 - 495 / 990) ** 0.9, abs=1e-15)
    assert lr_at(505, cfg()) == pytest.approx(0.005359, abs=1e-6)


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(1001, cfg())


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.integers(0, 50))
def test_lr_monotone_after_warmup(total, warm):
    if warm >= total:
        warm = total - 1
    c = cfg(total_iters=total, warmup_iters=warm)
    lrs = [lr_at(i, c) for i in range(warm, total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    if warm:
        assert lr_at(warm - 1, c) == pytest.approx(lr_at(warm, c))


def test_default_warmup_is_one_percent():
    assert TrainConfig(total_iters=5000).warmup_iters == 50


def test_dataset_presets():
    cam = TrainConfig.camvid(100)
    assert (cam.base_lr, cam.weight_decay, cam.crop, cam.batch_size) == (0.005, 5e-5, (672, 672), 16)
    city = TrainConfig.cityscapes(100)
    assert (city.base_lr, city.momentum, city.crop, city.batch_size) == (0.01, 0.9, (512, 512), 32)


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig(crop=(500, 512))
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(total_iters=10, warmup_iters=10)


def test_iters_for_epochs():
    assert iters_for_epochs(3, 10, 4) == 9


def test_sgd_plain_step():
    p, g, v = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.zeros(2)
    sgd_step([p], [g], [v], 1.0, 0.0, 0.0)
    np.testing.assert_array_equal(p, [0.5, 3.0])


def test_sgd_momentum_coast():
    p, v = np.array([1.0]), np.array([2.0])
    sgd_step([p], [np.zeros(1)], [v], 0.1, 0.9, 0.0)
    assert p[0] == 1.0 - 0.1 * 0.9 * 2.0


def test_sgd_zero_lr_is_bit_identical():
    p = np.random.default_rng(0).standard_normal(5)
    before = p.copy()
    sgd_step([p], [np.ones(5)], [np.zeros(5)], 0.0, 0.9, 5e-4)
    np.testing.assert_array_equal(p, before)


def test_sgd_quadratic_trajectory():
    # f(x) = 0.5 * a * x^2, gradient a*x; compare against the scalar recurrence
    a, lr, m, wd = 3.0, 0.05, 0.9, 1e-3
    t = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD([t], m, wd)
    x, v = 2.0, 0.0
    for _ in range(5):
        t.grad = a * t.data.copy()
        opt.step(lr)
        v = m * v + a * x + wd * x
        x = x - lr * v
        assert t.data[0] == x


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9, 0.0)


def test_plain_ce_matches_direct():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 4, 3, 5))
    y = rng.integers(0, 4, (2, 3, 5))
    y[1, 0, 0] = 255
    assert cross_entropy(Tensor(z), y).item() == pytest.approx(pixel_ce_direct(z, y), abs=1e-12)


def test_ohem_full_quota_equals_plain():
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((1, 3, 6, 6)))
    y = rng.integers(0, 3, (1, 6, 6))
    for thresh in (0.1, 0.5, 0.99):
        assert ohem_ce(z, y, thresh=thresh, min_kept=1.0).item() == cross_entropy(z, y).item()


def test_ohem_four_pixel_toy():
    # per-pixel true-class probs 0.9, 0.6, 0.3, 0.8
    probs = np.array([0.9, 0.6, 0.3, 0.8])
    logits = np.stack([np.log(probs), np.log(1 - probs)]).reshape(2, 2, 2)
    y = np.zeros((2, 2), dtype=np.int64)
    loss = -np.log(probs)
    # thresh 0.7 keeps {0.6, 0.3}; quota ceil(0.5*4)=2 is met
    got = ohem_ce(Tensor(logits), y, thresh=0.7, min_kept=0.5).item()
    assert got == pytest.approx((loss[1] + loss[2]) / 2, abs=1e-12)
    # thresh 0.5 keeps only {0.3}; the quota adds the next-hardest (0.6)
    got = ohem_ce(Tensor(logits), y, thresh=0.5, min_kept=0.5).item()
    assert got == pytest.approx((loss[1] + loss[2]) / 2, abs=1e-12)
    # min_kept 0.75 -> three pixels: 0.3, 0.6, 0.8
    got = ohem_ce(Tensor(logits), y, thresh=0.5, min_kept=0.75).item()
    assert got == pytest.approx((loss[1] + loss[2] + loss[3]) / 3, abs=1e-12)


def test_ohem_ignores_ignore_index():
    z = Tensor(np.zeros((2, 2, 2)))
    y = np.array([[0, 255], [255, 255]])
    assert cross_entropy(z, y).item() == pytest.approx(math.log(2))


def test_ce_bad_label():
    with pytest.raises(DataError):
        cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 5))


def test_ohem_gradient():
    assert ohem_gradient_check().passed


def test_random_crop_identity_and_determinism():
    s = synth_dataset(1, (64, 64), 3)[0]
    same = random_crop(s, (64, 64), 0)
    np.testing.assert_array_equal(same.image, s.image)
    a, b = random_crop(s, (32, 32), 7), random_crop(s, (32, 32), 7)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.label, b.label)
    with pytest.raises(ShapeError):
        random_crop(s, (96, 64), 0)


def test_random_crop_uniform_offsets():
    # 35x35 -> 32x32 leaves offsets 0..3 per axis; the crop's top-left label
    # pixel encodes which offset was drawn
    lab = np.zeros((35, 35), np.uint8)
    lab[:4, :4] = np.arange(16).reshape(4, 4)
    s = SegSample(np.zeros((1, 35, 35), np.float32), lab, "g")
    draws = 10_000
    counts = np.bincount([random_crop(s, (32, 32), seed).label[0, 0] for seed in range(draws)],
                         minlength=16)
    p = 1 / 16
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() < 3 * sigma


def small_run(tmp_path=None, iters=3, **kw):
    model = build_model(NetworkConfig(version="light", num_classes=3, seed=0))
    data = synth_dataset(4, (64, 64), 3, seed=1)
    tc = TrainConfig(total_iters=iters, batch_size=2, crop=(32, 32), log_every=1, seed=2, **kw)
    return model, train_loop(model, data, tc, out_dir=tmp_path)


def test_train_loop_records_and_checkpoints(tmp_path):
    model, rep = small_run(tmp_path, ckpt_every=2)
    assert [r["iter"] for r in rep.records] == [0, 1, 2]
    assert set(rep.records[0]) == {"iter", "lr", "loss", "wall_ms"}
    assert any(p.endswith("ckpt_000002.bdgn") for p in rep.checkpoints)
    assert rep.checkpoints[-1].endswith("final.bdgn")
    assert not model.training
    assert len(rep.to_jsonl().splitlines()) == 3


def test_train_loop_deterministic():
    _, a = small_run()
    _, b = small_run()
    assert a.losses == b.losses


def test_train_loop_workers_match_single():
    _, a = small_run()
    _, b = small_run(workers=2)
    assert a.losses == b.losses


def test_zero_iters_leaves_model_unchanged(tmp_path):
    model = build_model(NetworkConfig(version="light", num_classes=3, seed=0))
    save_checkpoint(model, tmp_path / "before.bdgn")
    train_loop(model, synth_dataset(2, (64, 64), 3), TrainConfig(total_iters=0, crop=(64, 64)),
               out_dir=tmp_path)
    assert (tmp_path / "before.bdgn").read_bytes() == (tmp_path / "final.bdgn").read_bytes()


def test_nan_loss_aborts_with_iteration():
    model = build_model(NetworkConfig(version="light", num_classes=3, seed=0))
    model.head.cls.bias.data[:] = np.nan
    with pytest.raises(NumericAbort) as e:
        train_loop(model, synth_dataset(2, (64, 64), 3),
                   TrainConfig(total_iters=2, batch_size=1, crop=(64, 64)))
    assert e.value.iteration == 0


def test_empty_dataset():
    model = build_model(NetworkConfig(version="light", num_classes=3))
    with pytest.raises(DataError):
        train_loop(model, [], TrainConfig(total_iters=1))
