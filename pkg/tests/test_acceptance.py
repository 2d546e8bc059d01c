"""The ten acceptance criteria, each at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary. Set
``BDG_SKIP_LARGE_FULLRES=1`` to skip the Large 1024x2048 forward on hosts
with less than ~4 GB of free memory.
"""

import os
import time

import numpy as np
import pytest

from bidganet import check
from bidganet.data import ConfusionMatrix, evaluate, miou, synth_dataset
from bidganet.model import FUSION_MODES, VERSIONS, NetworkConfig, SegModel, build_model, count_params
from bidganet.oracles import param_count_oracle
from bidganet.tensor import Tensor
from bidganet.train import TrainConfig, cross_entropy, lr_at, ohem_ce, train_loop

pytestmark = pytest.mark.slow


def test_1_attention_correctness(criterion):
    t0 = time.perf_counter()
    rows, formula = check.attention_oracle_check(instances=100, seed=0)
    dt = time.perf_counter() - t0
    ok = criterion(1, rows.passed and formula.passed and dt < 10,
                   f"row-sum err {rows.value:.1e} (<=1e-5), formula err {formula.value:.1e} "
                   f"(<=1e-10), {dt:.1f}s (<10s)")
    assert ok


def test_2_conv_oracle(criterion):
    res = check.conv_oracle_check(cases=100, seed=0, tol=1e-5)
    ok = criterion(2, res.passed and res.seconds < 60,
                   f"max rel err {res.value:.1e} (<1e-5), {res.seconds:.1f}s (<60s)")
    assert ok


def test_3_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = check.op_gradient_checks(0)
    results += [check.attention_gradient_check(0), check.rsu_gradient_check(0),
                check.dga_gradient_check(0), check.ohem_gradient_check(0),
                check.end_to_end_gradient_check(0)]
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.value)
    failed = [r.name for r in results if not r.passed]
    ok = criterion(3, not failed and dt < 600,
                   f"{len(results)} checks, worst {worst.name} {worst.value:.1e} (<1e-4), "
                   f"{dt:.0f}s (<600s); end-to-end pinned to base ReLU/pool choices, BN on running stats"
                   + (f", failed {failed}" if failed else ""))
    assert ok


FULL_RES = (1024, 2048)


@pytest.mark.parametrize("version", VERSIONS)
def test_4_shape_contracts(version, criterion):
    model = build_model(NetworkConfig(version=version, num_classes=19))
    model.eval()
    x = Tensor(np.random.default_rng(0).standard_normal((3, 64, 64)).astype(np.float32))
    small = model(x).shape
    ok = small == (19, 64, 64)
    detail = f"{version} 64x64 -> {small}"
    if version == "large" and os.environ.get("BDG_SKIP_LARGE_FULLRES"):
        detail += ", full-res skipped by BDG_SKIP_LARGE_FULLRES"
    else:
        big = model(Tensor(np.zeros((3,) + FULL_RES, np.float32))).shape
        ok &= big == (19,) + FULL_RES
        detail += f", 1024x2048 -> {big}"
    # each RSU at the size it sees for a 64x64 image, and at an odd size
    bad = 0
    for i, blk in enumerate(model.low):
        for hw in ((64 >> i, 64 >> i), (33, 17)):
            x = Tensor(np.zeros((1, blk.cfg.c_in) + hw, np.float32))
            bad += blk(x).shape[2:] != hw
    ok &= bad == 0
    assert criterion(4, ok, detail + f", RSU size violations {bad}")


def test_4_rsu_preserves_size(criterion):
    res = check.rsu_shape_check(sizes=(64, 40, 33, 5, 1))
    assert criterion(4, res.passed, "RSU-4..7 preserve size on 64/40/33/5/1")


def test_5_fusion_algebra(criterion):
    cfg = dict(version="light", num_classes=5, seed=3)
    dga = build_model(NetworkConfig(fusion_mode="dga", **cfg)).astype(np.float64)
    cat = build_model(NetworkConfig(fusion_mode="concat", **cfg)).astype(np.float64)
    dga.fusion.ga_hi.m_v.data[:] = 0
    dga.fusion.ga_lo.m_v.data[:] = 0
    rng = np.random.default_rng(0)
    equal = True
    for mode in ("eval", "train"):
        for m in (dga, cat):
            m.train(mode == "train")
        for _ in range(3):
            x = Tensor(rng.standard_normal((2, 3, 64, 64)))
            equal &= np.array_equal(dga(x, seed=1).data, cat(x, seed=1).data)
    assert criterion(5, equal, "zeroed value units: DGA == concat bit-for-bit (eval and train)")


def test_6_linear_complexity(criterion):
    t0 = time.perf_counter()
    ga, naive = check.ga_scaling_check(runs=20)
    dt = time.perf_counter() - t0
    ok = criterion(6, ga.passed and naive.passed and dt < 120,
                   f"GA ratio {ga.value:.2f} (in [2.5, 6.0]), naive ratio {naive.value:.1f} (>=10), "
                   f"{dt:.0f}s (<120s)")
    assert ok


TOY = dict(base_lr=0.05, total_iters=400, crop=(64, 64), batch_size=8, ohem=True, seed=0,
           log_every=0)


def _toy_run():
    data = synth_dataset(8, (64, 64), classes=3, seed=0)
    model = build_model(NetworkConfig(version="light", num_classes=3, seed=0))
    report = train_loop(model, data, TrainConfig(**TOY))
    return model, data, report


def test_7_toy_training(criterion):
    t0 = time.perf_counter()
    model, data, first = _toy_run()
    x = Tensor(np.stack([s.image for s in data]))
    y = np.stack([s.label for s in data])
    ce = cross_entropy(model(x), y).item()
    _, m = miou(evaluate(model, data, 3))
    _, _, second = _toy_run()
    same = first.losses == second.losses
    dt = time.perf_counter() - t0
    ok = criterion(7, ce < 0.1 and m >= 0.95 and same,
                   f"plain CE {ce:.4f} (<0.1), train mIoU {m:.4f} (>=0.95), "
                   f"repeat identical {same}, {dt / 60:.1f} min for both runs")
    assert ok


def test_8_ablation_direction(criterion):
    train = synth_dataset(32, (128, 128), classes=3, seed=0)
    held_out = synth_dataset(50, (128, 128), classes=3, seed=0, start=1000)
    scores = {}
    for mode in ("dga", "concat"):
        model = build_model(NetworkConfig(version="light", num_classes=3, fusion_mode=mode, seed=0))
        # trained at the evaluation size: the pixel softmax makes attention size-dependent
        train_loop(model, train, TrainConfig(base_lr=0.01, total_iters=300, crop=(128, 128),
                                             batch_size=4, seed=0, log_every=0))
        scores[mode] = miou(evaluate(model, held_out, 3))[1]
    ok = criterion(8, scores["dga"] >= scores["concat"] - 0.02,
                   f"held-out mIoU dga {scores['dga']:.4f} vs concat {scores['concat']:.4f} (-0.02 margin)")
    assert ok


def test_9_parameter_accounting(criterion):
    totals = {}
    mismatches = []
    for v in VERSIONS:
        for mode in FUSION_MODES:
            cfg = NetworkConfig(version=v, fusion_mode=mode)
            n = count_params(SegModel(cfg))
            if n != param_count_oracle(cfg):
                mismatches.append((v, mode))
            if mode == "dga":
                totals[v] = n
    ordered = totals["light"] < totals["base"] < totals["large"]
    ok = criterion(9, not mismatches and ordered,
                   f"oracle mismatches {mismatches}, light {totals['light']:,} < base {totals['base']:,} "
                   f"< large {totals['large']:,}")
    assert ok


def test_10_schedule_and_loss_units(criterion):
    cfg = TrainConfig(base_lr=0.01, total_iters=1000, warmup_iters=10, poly_power=0.9)
    probes = {0: 0.001, 4: 0.005, 10: 0.01, 505: 0.01 * 0.5 ** 0.9, 802: 0.01 * 0.2 ** 0.9,
              1000: 0.0}
    lr_err = max(abs(lr_at(i, cfg) - v) for i, v in probes.items())
    rng = np.random.default_rng(0)
    z = Tensor(rng.standard_normal((2, 4, 8, 8)))
    y = rng.integers(0, 4, (2, 8, 8))
    y[0, :2] = 255
    same = ohem_ce(z, y, ohem=True, thresh=0.3, min_kept=1.0).item() == cross_entropy(z, y).item()
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [2, 4]]
    _, m = miou(cm)
    ok = criterion(10, lr_err <= 1e-12 and same and abs(m - 0.5357) <= 1e-4,
                   f"lr max err {lr_err:.1e} (<=1e-12), ohem@1.0 == CE {same}, mIoU {m:.4f} (0.5357)")
    assert ok
